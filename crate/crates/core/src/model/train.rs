//! Deterministic training loop.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::alignment::LossBreakdown;
use crate::checkpoint;
use crate::cloud::PointCloud;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::tensor::Graph;

use super::config::ModelConfig;
use super::net::Model;
use super::optim::AdamW;

/// Aborts training when the total loss exceeds this or is not finite.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

pub const LOSS_CSV_HEADER: &str = "step,loss_cd,l_sp,l_ch,total";
pub const FINAL_CHECKPOINT: &str = "model.mpcc";
pub const CONFIG_SNAPSHOT: &str = "config.txt";

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub loss: LossBreakdown,
    /// Per-parameter gradients in store order.
    pub grads: Vec<Vec<f64>>,
}

/// A model with its optimizer state.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: Model,
    pub opt: AdamW,
}

impl Trainer {
    pub fn new(model: Model) -> Self {
        let opt = AdamW::new(&model.store, model.cfg.lr, model.cfg.weight_decay);
        Self { model, opt }
    }

    /// One forward, backward and optimizer update. `target` is ignored when
    /// the config does not read the target domain.
    pub fn step(
        &mut self,
        source: &[PointCloud],
        target: Option<&[PointCloud]>,
        gt: &[PointCloud],
    ) -> Result<StepOutput> {
        let model = &self.model;
        let (src, tgt) = model.scan_batch(source, target)?;
        let mut g = Graph::new();
        let p = model.store.bind(&mut g, true);
        // inputs are validated clouds, so a domain error here is numeric breakdown
        let nodes = model
            .forward_train(&mut g, &p, &src, tgt.as_deref(), gt)
            .map_err(|e| match e {
                Error::Domain(m) => Error::Divergence(format!("forward failed: {m}")),
                e => e,
            })?;
        let total = g.value(nodes.total).item()?;
        if !total.is_finite() || total > DIVERGENCE_LIMIT {
            return Err(Error::Divergence(format!(
                "total loss {total} (loss_cd {}, limit {DIVERGENCE_LIMIT})",
                g.value(nodes.loss_cd).item()?
            )));
        }
        let loss = nodes.breakdown(&g, &model.cfg)?;
        g.backward(nodes.total)?;
        let grads = p.grads(&g);
        self.opt.step(&mut self.model.store, &grads)?;
        Ok(StepOutput { loss, grads })
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub losses: Vec<LossBreakdown>,
    pub steps: usize,
    /// Target clouds fetched over the whole run.
    pub target_reads: usize,
    pub checkpoints: Vec<PathBuf>,
    pub model: Model,
}

impl TrainReport {
    pub fn loss_csv(&self) -> String {
        loss_csv(&self.losses)
    }
}

pub fn loss_csv(losses: &[LossBreakdown]) -> String {
    let mut s = String::from(LOSS_CSV_HEADER);
    s.push('\n');
    for (i, l) in losses.iter().enumerate() {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            i + 1,
            l.loss_cd,
            l.l_sp,
            l.l_ch,
            l.total
        );
    }
    s
}

/// Trains from scratch. With `out_dir`, writes `config.txt`, `loss.csv`,
/// per-epoch checkpoints and `model.mpcc`; on divergence writes
/// `divergence.txt` before returning the error.
pub fn train_loop(
    source: &Dataset,
    target: &Dataset,
    cfg: &ModelConfig,
    out_dir: Option<&Path>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if source.is_empty() || target.is_empty() {
        return Err(Error::Usage(
            "training needs nonempty source and target datasets".into(),
        ));
    }
    let gt: Vec<&PointCloud> = source
        .samples
        .iter()
        .map(|s| {
            s.complete
                .as_ref()
                .ok_or_else(|| Error::Usage(format!("source sample {} has no ground truth", s.id)))
        })
        .collect::<Result<_>>()?;
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(CONFIG_SNAPSHOT);
        fs::write(&path, cfg.to_text()).map_err(|e| Error::io(&path, e))?;
    }

    let mut root = SplitMix64::new(cfg.seed);
    let mut src_rng = root.fork(3);
    let mut tgt_rng = root.fork(4);
    let mut trainer = Trainer::new(Model::new(cfg.clone())?);
    let reads_target = cfg.uses_target();
    let n_src = source.len();
    let steps_per_epoch = n_src.div_ceil(cfg.batch);
    let mut losses = Vec::new();
    let mut checkpoints = Vec::new();
    let mut target_reads = 0usize;
    let mut perm: Vec<usize> = (0..n_src).collect();

    'epochs: for epoch in 1..=cfg.epochs {
        src_rng.shuffle(&mut perm);
        for s in 0..steps_per_epoch {
            if cfg.max_steps > 0 && losses.len() >= cfg.max_steps {
                break 'epochs;
            }
            let idx: Vec<usize> = (0..cfg.batch)
                .map(|j| perm[(s * cfg.batch + j) % n_src])
                .collect();
            let src: Vec<PointCloud> = idx
                .iter()
                .map(|&i| source.samples[i].partial.clone())
                .collect();
            let gts: Vec<PointCloud> = idx.iter().map(|&i| gt[i].clone()).collect();
            let tgt: Option<Vec<PointCloud>> = reads_target.then(|| {
                (0..cfg.batch)
                    .map(|_| {
                        target_reads += 1;
                        target.samples[tgt_rng.below(target.len())].partial.clone()
                    })
                    .collect()
            });
            let out = match trainer.step(&src, tgt.as_deref(), &gts) {
                Ok(o) => o,
                Err(e @ Error::Divergence(_)) => {
                    if let Some(dir) = out_dir {
                        dump_divergence(dir, losses.len() + 1, &e, &trainer.model, &losses)?;
                    }
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            log::debug!("step {} total {}", losses.len() + 1, out.loss.total);
            losses.push(out.loss);
        }
        if let Some(dir) = out_dir {
            if epoch % cfg.checkpoint_every == 0 {
                let path = dir.join(format!("ckpt-epoch{epoch:04}.mpcc"));
                checkpoint::save(&path, &trainer.model.store.to_named())?;
                checkpoints.push(path);
            }
        }
    }
    if let Some(dir) = out_dir {
        let path = dir.join("loss.csv");
        fs::write(&path, loss_csv(&losses)).map_err(|e| Error::io(&path, e))?;
        let path = dir.join(FINAL_CHECKPOINT);
        checkpoint::save(&path, &trainer.model.store.to_named())?;
        checkpoints.push(path);
    }
    Ok(TrainReport {
        steps: losses.len(),
        losses,
        target_reads,
        checkpoints,
        model: trainer.model,
    })
}

fn dump_divergence(
    dir: &Path,
    step: usize,
    err: &Error,
    model: &Model,
    losses: &[LossBreakdown],
) -> Result<()> {
    let mut s = format!("diverged at step {step}: {err}\n\nparameter max |value|:\n");
    for (name, t) in model.store.iter() {
        let m = t.data().iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let _ = writeln!(s, "{name} {m}");
    }
    s.push_str("\nloss history:\n");
    s.push_str(&loss_csv(losses));
    let path = dir.join("divergence.txt");
    fs::write(&path, s).map_err(|e| Error::io(&path, e))
}

/// Loads a checkpoint written by [`train_loop`], taking the configuration
/// from `config.txt` beside it unless one is given.
pub fn load_model(ckpt: &Path, cfg: Option<ModelConfig>) -> Result<Model> {
    let cfg = match cfg {
        Some(c) => c,
        None => {
            let dir = ckpt.parent().unwrap_or(Path::new("."));
            ModelConfig::load(dir.join(CONFIG_SNAPSHOT))?
        }
    };
    let mut model = Model::new(cfg)?;
    let named = checkpoint::load(ckpt)?;
    model.store.load_named(&named)?;
    Ok(model)
}
