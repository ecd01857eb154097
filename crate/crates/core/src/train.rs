//! Training loop, metrics stream and evaluation helpers.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::{self, PairedSample};
use crate::error::{Error, Result};
use crate::metrics::{mean_psnr, ssim, PSNR_LOG_CAP};
use crate::miloss::embedding_cosine;
use crate::model::Mitnet;
use crate::nn::Scope;
use crate::optim::Adam;

pub const METRICS_COLUMNS: &str = "epoch,iter,l1,l2,lmi,total,psnr,ssim,lr,wall_time";
pub const METRICS_VERSION: &str = "1";

/// Losses and batch metrics of one iteration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub l1: f64,
    pub l2: f64,
    /// Summed MI over the three scales; 0 when no embeddings are computed.
    pub lmi: f64,
    pub total: f64,
    /// Stage-2 output of this batch (clamped) against the clean images.
    pub psnr: f64,
    pub ssim: f64,
}

/// One metrics row.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub iter: usize,
    pub stats: StepStats,
    pub lr: f64,
    pub wall_time: f64,
}

/// Writes the commented header and CSV rows.
pub struct MetricsWriter {
    out: BufWriter<File>,
}

impl MetricsWriter {
    /// Create (or, when `append` is set and the file exists, extend) a metrics file.
    pub fn open(path: &Path, cfg: &RunConfig, append: bool) -> Result<Self> {
        let exists = path.exists();
        let file = if append && exists {
            OpenOptions::new().append(true).open(path)
        } else {
            File::create(path)
        }
        .map_err(|e| Error::io(path, e))?;
        let mut w = MetricsWriter {
            out: BufWriter::new(file),
        };
        if !(append && exists) {
            let mut head = format!("# mitnet metrics v{METRICS_VERSION}\n# config_hash: {}\n", cfg.hash());
            for line in cfg.to_toml().lines() {
                head.push_str("# config: ");
                head.push_str(line);
                head.push('\n');
            }
            head.push_str(METRICS_COLUMNS);
            head.push('\n');
            w.out.write_all(head.as_bytes()).map_err(|e| Error::io(path, e))?;
        }
        Ok(w)
    }

    pub fn write(&mut self, r: &MetricsRow) -> std::io::Result<()> {
        let s = &r.stats;
        writeln!(
            self.out,
            "{},{},{},{},{},{},{},{},{},{}",
            r.epoch,
            r.iter,
            s.l1,
            s.l2,
            s.lmi,
            s.total,
            s.psnr.min(PSNR_LOG_CAP),
            s.ssim,
            r.lr,
            r.wall_time
        )?;
        self.out.flush()
    }
}

/// Parse data rows of a metrics file (comments and header skipped).
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |line: &str| Error::Dataset(format!("malformed metrics row in {}: {line}", path.display()));
    text.lines()
        .filter(|l| !l.starts_with('#') && *l != METRICS_COLUMNS && !l.is_empty())
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 10 {
                return Err(bad(line));
            }
            let num = |i: usize| f[i].parse::<f64>().map_err(|_| bad(line));
            let int = |i: usize| f[i].parse::<usize>().map_err(|_| bad(line));
            Ok(MetricsRow {
                epoch: int(0)?,
                iter: int(1)?,
                stats: StepStats {
                    l1: num(2)?,
                    l2: num(3)?,
                    lmi: num(4)?,
                    total: num(5)?,
                    psnr: num(6)?,
                    ssim: num(7)?,
                },
                lr: num(8)?,
                wall_time: num(9)?,
            })
        })
        .collect()
}

pub fn load_training_set(cfg: &RunConfig) -> Result<Vec<PairedSample>> {
    match (&cfg.data.train_dir, &cfg.data.synthetic) {
        (Some(dir), _) => Ok(data::load_dataset(dir)?.samples),
        (None, Some(s)) => data::synthetic_pairs(s.count, s.size, s.seed),
        (None, None) => Err(Error::Config("no training data configured".into())),
    }
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub epochs_completed: usize,
    pub iterations: usize,
    pub last: Option<StepStats>,
    pub best_psnr: f64,
    pub metrics_path: PathBuf,
    pub last_checkpoint: PathBuf,
    pub best_checkpoint: PathBuf,
}

pub struct Trainer {
    pub cfg: RunConfig,
    pub net: Mitnet,
    pub adam: Adam,
    pub samples: Vec<PairedSample>,
    /// Epochs completed so far.
    pub epoch: usize,
    pub iteration: usize,
    pub best_psnr: f64,
    resumed: bool,
}

impl Trainer {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let samples = load_training_set(&cfg)?;
        let net = Mitnet::new(cfg.model.clone(), cfg.train.seed)?;
        let adam = Adam::new(cfg.optim.clone(), &net.store);
        Ok(Trainer {
            cfg,
            net,
            adam,
            samples,
            epoch: 0,
            iteration: 0,
            best_psnr: 0.0,
            resumed: false,
        })
    }

    /// Continue from a checkpoint. The model section of `cfg` must match the
    /// checkpoint's; other settings (epochs, output folder) may differ.
    pub fn resume(cfg: RunConfig, ckpt: &Checkpoint) -> Result<Self> {
        let mut t = Trainer::new(cfg)?;
        ckpt.load_weights_into(&mut t.net)?;
        t.adam = ckpt.restore_optimizer(&t.net)?;
        t.adam.cfg = t.cfg.optim.clone();
        t.epoch = ckpt.epoch;
        t.iteration = ckpt.iteration;
        t.best_psnr = ckpt.best_psnr;
        t.resumed = true;
        Ok(t)
    }

    fn epoch_batches(&self, epoch: usize) -> Result<Vec<Vec<PairedSample>>> {
        let mut order: Vec<usize> = (0..self.samples.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(data::sample_seed(self.cfg.train.seed, epoch, "#order"));
        order.shuffle(&mut rng);
        let mut out = Vec::new();
        for chunk in order.chunks(self.cfg.data.batch_size) {
            let batch = chunk
                .iter()
                .map(|&i| {
                    let s = &self.samples[i];
                    if self.cfg.data.augment {
                        data::augment(s, data::sample_seed(self.cfg.train.seed, epoch, &s.id), self.cfg.data.patch)
                    } else {
                        Ok(s.clone())
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            out.push(batch);
        }
        Ok(out)
    }

    /// Forward, backward and one optimizer step on a batch.
    pub fn step(&mut self, batch: &[PairedSample], lr: f64) -> Result<StepStats> {
        let (hazy, gt) = data::batch(batch)?;
        let w = self.cfg.loss;
        let (stats, grads) = {
            let mut s = Scope::training(&self.net.store);
            let x = s.constant(hazy);
            let g = s.constant(gt.clone());
            let out = self.net.forward(&mut s, x, true)?;
            let l1 = s.stage1_loss_guided(out.stage1.output, x, g, &w, self.net.guidance())?;
            let l2 = s.stage2_loss(out.stage2.output, g, &w)?;
            let mi = match (out.stage1.embeddings, out.stage2.embeddings) {
                (Some(d), Some(e)) => Some(s.multi_scale_mi(&d, &e)?),
                _ => None,
            };
            let total = s.total_loss(l1, l2, mi, &w)?;
            let mut stats = StepStats {
                l1: s.value(l1).data()[0],
                l2: s.value(l2).data()[0],
                lmi: mi.map_or(0.0, |m| s.value(m).data()[0]),
                total: s.value(total).data()[0],
                psnr: 0.0,
                ssim: 0.0,
            };
            if ![stats.l1, stats.l2, stats.lmi, stats.total].iter().all(|v| v.is_finite()) {
                return Err(self.nan_abort(&stats, batch));
            }
            let y2 = s.value(out.stage2.output).clamp(0.0, 1.0);
            stats.psnr = mean_psnr(&y2, &gt)?;
            stats.ssim = ssim(&y2, &gt)?;
            s.backward(total)?;
            (stats, s.param_grads())
        };
        if let Some((id, _)) = grads.iter().find(|(_, g)| !g.is_finite()) {
            let name = self.net.store.param(*id).name.clone();
            return Err(self.nan_abort_detail(format!("gradient of {name} is not finite"), &stats, batch));
        }
        self.adam.step(&mut self.net.store, &grads, lr);
        Ok(stats)
    }

    fn nan_abort(&self, stats: &StepStats, batch: &[PairedSample]) -> Error {
        self.nan_abort_detail("loss is not finite".into(), stats, batch)
    }

    fn nan_abort_detail(&self, what: String, stats: &StepStats, batch: &[PairedSample]) -> Error {
        let dump = self.cfg.train.out_dir.join("nan_dump.json");
        let ids: Vec<&str> = batch.iter().map(|s| s.id.as_str()).collect();
        let body = serde_json::json!({
            "epoch": self.epoch + 1,
            "iteration": self.iteration + 1,
            "problem": what,
            "l1": format!("{}", stats.l1),
            "l2": format!("{}", stats.l2),
            "lmi": format!("{}", stats.lmi),
            "total": format!("{}", stats.total),
            "batch": ids,
            "lr": self.cfg.optim.lr_at(self.epoch),
        });
        let written = std::fs::write(&dump, serde_json::to_string_pretty(&body).unwrap_or_default()).is_ok();
        Error::NanLoss {
            epoch: self.epoch + 1,
            iter: self.iteration + 1,
            detail: if written {
                format!("{what}; diagnostics in {}", dump.display())
            } else {
                what
            },
        }
    }

    /// Train until `train.epochs` epochs (or `train.max_iters` iterations)
    /// are done, writing metrics and checkpoints under `train.out_dir`.
    pub fn run(&mut self) -> Result<TrainSummary> {
        let out_dir = self.cfg.train.out_dir.clone();
        std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
        let metrics_path = out_dir.join("metrics.csv");
        let timing_path = out_dir.join("timing.csv");
        let last_path = out_dir.join("last.ckpt");
        let best_path = out_dir.join("best.ckpt");
        // a resumed trainer, or one called again after an earlier `run`, extends its files
        let continuing = self.resumed || self.iteration > 0;
        let mut metrics = MetricsWriter::open(&metrics_path, &self.cfg, continuing)?;
        let mut timing = if self.cfg.train.log_wall_time {
            None
        } else if continuing && timing_path.exists() {
            let f = OpenOptions::new().append(true).open(&timing_path).map_err(|e| Error::io(&timing_path, e))?;
            Some(BufWriter::new(f))
        } else {
            let f = File::create(&timing_path).map_err(|e| Error::io(&timing_path, e))?;
            let mut w = BufWriter::new(f);
            writeln!(w, "# config_hash: {}\nepoch,iter,seconds", self.cfg.hash()).map_err(|e| Error::io(&timing_path, e))?;
            Some(w)
        };
        let start = Instant::now();
        let mut last = None;
        let limit = self.cfg.train.max_iters.unwrap_or(usize::MAX);

        'epochs: while self.epoch < self.cfg.train.epochs && self.iteration < limit {
            let lr = self.cfg.optim.lr_at(self.epoch);
            let (mut psnr_sum, mut count) = (0.0, 0usize);
            for batch in self.epoch_batches(self.epoch)? {
                let stats = self.step(&batch, lr)?;
                self.iteration += 1;
                let elapsed = start.elapsed().as_secs_f64();
                let row = MetricsRow {
                    epoch: self.epoch + 1,
                    iter: self.iteration,
                    stats,
                    lr,
                    wall_time: if self.cfg.train.log_wall_time { elapsed } else { 0.0 },
                };
                metrics.write(&row).map_err(|e| Error::io(&metrics_path, e))?;
                if let Some(t) = timing.as_mut() {
                    writeln!(t, "{},{},{elapsed:.3}", row.epoch, row.iter).map_err(|e| Error::io(&timing_path, e))?;
                }
                psnr_sum += stats.psnr.min(PSNR_LOG_CAP) * batch.len() as f64;
                count += batch.len();
                last = Some(stats);
                if self.iteration >= limit {
                    self.finish_epoch(psnr_sum / count as f64, &best_path)?;
                    break 'epochs;
                }
            }
            self.finish_epoch(psnr_sum / count as f64, &best_path)?;
            if self.epoch % self.cfg.train.checkpoint_every == 0 {
                self.checkpoint().save(&last_path)?;
            }
        }
        if let Some(t) = timing.as_mut() {
            t.flush().map_err(|e| Error::io(&timing_path, e))?;
        }
        self.checkpoint().save(&last_path)?;
        Ok(TrainSummary {
            epochs_completed: self.epoch,
            iterations: self.iteration,
            last,
            best_psnr: self.best_psnr,
            metrics_path,
            last_checkpoint: last_path,
            best_checkpoint: best_path,
        })
    }

    fn finish_epoch(&mut self, psnr: f64, best_path: &Path) -> Result<()> {
        self.epoch += 1;
        if psnr > self.best_psnr || !best_path.exists() {
            self.best_psnr = self.best_psnr.max(psnr);
            self.checkpoint().save(best_path)?;
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(&self.cfg, &self.net, &self.adam, self.epoch, self.iteration, self.best_psnr)
    }
}

/// Per-image and mean quality of a model on a set of pairs.
#[derive(Clone, Debug)]
pub struct EvalReport {
    /// `(id, psnr, ssim)`.
    pub per_image: Vec<(String, f64, f64)>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
}

/// Evaluate the clamped stage-2 output of `net` on each sample, optionally
/// writing the dehazed images to `dump_dir`.
pub fn evaluate(net: &Mitnet, samples: &[PairedSample], dump_dir: Option<&Path>) -> Result<EvalReport> {
    let mut per_image = Vec::with_capacity(samples.len());
    for s in samples {
        let (_, y2) = net.infer(&s.hazy)?;
        let p = mean_psnr(&y2, &s.gt)?;
        let q = ssim(&y2, &s.gt)?;
        if let Some(dir) = dump_dir {
            data::write_png(&dir.join(format!("{}.png", s.id)), &y2)?;
        }
        per_image.push((s.id.clone(), p, q));
    }
    let n = per_image.len().max(1) as f64;
    Ok(EvalReport {
        mean_psnr: per_image.iter().map(|r| r.1).sum::<f64>() / n,
        mean_ssim: per_image.iter().map(|r| r.2).sum::<f64>() / n,
        per_image,
    })
}

/// Mean cosine similarity between paired stage-1 decoder and stage-2 encoder
/// embeddings (softmax-normalised), over all samples and the three scales.
pub fn embedding_similarity(net: &Mitnet, samples: &[PairedSample]) -> Result<f64> {
    if !net.cfg.use_mic {
        return Err(Error::Config("embedding similarity needs a model with MI heads".into()));
    }
    let (hazy, _) = data::batch(samples)?;
    let mut s = Scope::inference(&net.store);
    let x = s.constant(hazy);
    let out = net.forward(&mut s, x, true)?;
    let (d, e) = match (out.stage1.embeddings, out.stage2.embeddings) {
        (Some(d), Some(e)) => (d, e),
        _ => return Err(Error::Config("model produced no embeddings".into())),
    };
    let mut total = 0.0;
    for i in 0..3 {
        total += embedding_cosine(s.value(d[i]), s.value(e[i]))?;
    }
    Ok(total / 3.0)
}
