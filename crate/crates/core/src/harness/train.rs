//! Training loop with atomic checkpoints and bit-exact resume.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::data::{format_annotations, load_dataset, Scene};
use super::eval::{evaluate, EvalReport};
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::model::{Detector, LossSummary};
use crate::nn::AdamW;
use crate::tensor::{checkpoint, Tensor};

const BATCH_SALT: u64 = 0x7472_6169_6e5f_6261;

/// Model, optimizer and data for one training run.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: Detector,
    pub opt: AdamW,
    /// Steps completed so far.
    pub step: usize,
    pub train: Vec<(PathBuf, Scene)>,
    pub holdout: Vec<(PathBuf, Scene)>,
}

/// What [`train`] reports at the end.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub steps: usize,
    pub last: LossSummary,
    pub report: Option<EvalReport>,
    pub seconds: f64,
}

impl Trainer {
    /// Loads the dataset and builds a fresh model, or restores the one named
    /// by `cfg.resume`.
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let dir = cfg.data.clone().ok_or_else(|| Error::Config("no data directory given".into()))?;
        let mut scenes = load_dataset(&dir)?;
        if scenes.len() <= cfg.holdout {
            return Err(Error::Config(format!(
                "{} scenes in {} leave nothing to train on after holding out {}",
                scenes.len(),
                dir.display(),
                cfg.holdout
            )));
        }
        let holdout = scenes.split_off(scenes.len() - cfg.holdout);
        let mut t = match &cfg.resume {
            Some(path) => Self::restore(cfg.clone(), &checkpoint::load(path)?)?,
            None => {
                let model = Detector::new(&cfg.model)?;
                let opt = AdamW::new(&model.store, cfg.weight_decay, cfg.clip_norm);
                Trainer {
                    cfg: cfg.clone(),
                    model,
                    opt,
                    step: 0,
                    train: Vec::new(),
                    holdout: Vec::new(),
                }
            }
        };
        t.train = scenes;
        t.holdout = holdout;
        Ok(t)
    }

    fn restore(cfg: TrainConfig, tensors: &[(String, Tensor)]) -> Result<Self> {
        let model = Detector::from_tensors(tensors)?;
        if model.cfg != cfg.model {
            return Err(Error::Config("checkpoint model settings differ from the config file".into()));
        }
        let map: HashMap<&str, &Tensor> = tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let get = |name: &str| {
            map.get(name)
                .copied()
                .ok_or_else(|| Error::Format(format!("checkpoint lacks {name}; it cannot be resumed")))
        };
        let mut opt = AdamW::new(&model.store, cfg.weight_decay, cfg.clip_norm);
        opt.step = get("adam.step")?.item() as u64;
        for (i, (_, name, _)) in model.store.iter().enumerate() {
            opt.m[i] = get(&format!("adam.m.{name}"))?.data().to_vec();
            opt.v[i] = get(&format!("adam.v.{name}"))?.data().to_vec();
        }
        let step = get("train.step")?.item() as usize;
        Ok(Trainer {
            cfg,
            model,
            opt,
            step,
            train: Vec::new(),
            holdout: Vec::new(),
        })
    }

    /// Model, optimizer state and step counter.
    pub fn checkpoint_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = self.model.checkpoint_tensors();
        out.push(("train.step".into(), Tensor::scalar(self.step as f64)));
        out.push(("adam.step".into(), Tensor::scalar(self.opt.step as f64)));
        for (i, (_, name, t)) in self.model.store.iter().enumerate() {
            let shape = t.shape().to_vec();
            out.push((format!("adam.m.{name}"), Tensor::from_parts(shape.clone(), self.opt.m[i].clone())));
            out.push((format!("adam.v.{name}"), Tensor::from_parts(shape, self.opt.v[i].clone())));
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.checkpoint_tensors())
    }

    /// Training-scene indices drawn for `step`; depends only on the seed
    /// and the step.
    pub fn batch_indices(&self, step: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.model.seed ^ BATCH_SALT);
        rng.set_stream(step as u64);
        let n = self.train.len();
        rand::seq::index::sample(&mut rng, n, self.cfg.batch.min(n)).into_vec()
    }

    /// Loss of the batch for the current step and its parameter gradients.
    pub fn batch_loss(&self) -> Result<(LossSummary, Vec<Vec<f64>>, Vec<usize>)> {
        let idx = self.batch_indices(self.step);
        let norm: usize = idx.iter().map(|&i| self.train[i].1.objects.len()).sum();
        let mut grads: Option<Vec<Vec<f64>>> = None;
        let mut sum = LossSummary::default();
        for &i in &idx {
            let scene = &self.train[i].1;
            let mut s = self.model.session(true);
            let out = self.model.forward(&mut s, &scene.image)?;
            let (loss, parts) = self.model.loss(&mut s, &out, &scene.objects, &self.cfg.cost, norm as f64)?;
            sum.cls += parts.cls;
            sum.l1 += parts.l1;
            sum.riou += parts.riou;
            sum.total += parts.total;
            if !parts.total.is_finite() {
                return Ok((sum, Vec::new(), idx));
            }
            s.graph.backward(loss)?;
            let g = s.param_grads();
            match grads.as_mut() {
                None => grads = Some(g),
                Some(acc) => acc.iter_mut().flatten().zip(g.iter().flatten()).for_each(|(a, b)| *a += b),
            }
        }
        Ok((sum, grads.unwrap_or_default(), idx))
    }

    /// One optimizer step.
    pub fn step_once(&mut self) -> Result<LossSummary> {
        let (loss, mut grads, idx) = self.batch_loss()?;
        if !loss.total.is_finite() || grads.iter().flatten().any(|g| !g.is_finite()) {
            let dump = self.dump_nonfinite(&loss, &idx)?;
            return Err(Error::NonFiniteLoss {
                step: self.step + 1,
                dump: dump.display().to_string(),
            });
        }
        let lr = self.cfg.lr_at(self.step);
        self.opt.update(&mut self.model.store, &mut grads, lr);
        self.step += 1;
        Ok(loss)
    }

    fn dump_nonfinite(&self, loss: &LossSummary, idx: &[usize]) -> Result<PathBuf> {
        let mut path = self.cfg.out.clone().into_os_string();
        path.push(format!(".nonfinite-step{}.txt", self.step + 1));
        let path = PathBuf::from(path);
        let mut s = String::new();
        let _ = writeln!(s, "step {}\nloss {:?}\nlr {}", self.step + 1, loss, self.cfg.lr_at(self.step));
        for &i in idx {
            let (p, scene) = &self.train[i];
            let _ = writeln!(s, "\nscene {}\n{}", p.display(), format_annotations(&scene.objects));
        }
        fs::write(&path, s)?;
        Ok(path)
    }

    pub fn evaluate_holdout(&self) -> Result<EvalReport> {
        let scenes: Vec<&Scene> = self.holdout.iter().map(|(_, s)| s).collect();
        evaluate(&self.model, &scenes, 0.5, self.cfg.conf_floor)
    }
}

/// Runs the configured schedule, appending `step loss_cls loss_l1
/// loss_riou total [mAP]` lines to the log, and leaves the final
/// checkpoint at `cfg.out`.
pub fn train(cfg: &TrainConfig) -> Result<TrainOutcome> {
    let start = Instant::now();
    let mut t = Trainer::new(cfg.clone())?;
    let mut log = OpenOptions::new().create(true).append(true).open(&cfg.log)?;
    let mut last = LossSummary::default();
    let mut report = None;
    let over_budget = |start: &Instant| cfg.time_budget_secs > 0.0 && start.elapsed().as_secs_f64() > cfg.time_budget_secs;
    while t.step < cfg.steps && !over_budget(&start) {
        last = t.step_once()?;
        let mut line = format!("{} {:.6} {:.6} {:.6} {:.6}", t.step, last.cls, last.l1, last.riou, last.total);
        let finishing = t.step == cfg.steps || over_budget(&start);
        let periodic = cfg.eval_every > 0 && t.step % cfg.eval_every == 0;
        if (periodic || finishing) && !t.holdout.is_empty() {
            let r = t.evaluate_holdout()?;
            let _ = write!(line, " {:.4}", r.map);
            report = Some(r);
        }
        writeln!(log, "{line}")?;
        if cfg.ckpt_every > 0 && t.step % cfg.ckpt_every == 0 {
            t.save(&cfg.out)?;
        }
    }
    t.save(&cfg.out)?;
    Ok(TrainOutcome {
        steps: t.step,
        last,
        report,
        seconds: start.elapsed().as_secs_f64(),
    })
}
