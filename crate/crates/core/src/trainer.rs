//! Joint teacher-student optimisation, run logs and checkpoints.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use dyndistill_autodiff::{Gradients, Graph, ParamId, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{DistillConfig, ModelConfig};
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::model::{Detector, LossValues};

/// Consecutive iterations above the blow-up ratio before training aborts.
pub const DIVERGENCE_PATIENCE: u64 = 200;
pub const DIVERGENCE_RATIO: f64 = 10.0;

/// Epoch-wise shuffled batches; the order depends only on the seed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sampler {
    pub epoch: u64,
    pub cursor: usize,
}

impl Sampler {
    fn order(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(epoch);
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng);
        idx
    }

    pub fn next_batch(&mut self, seed: u64, n: usize, batch: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(batch);
        let mut order = Self::order(seed, self.epoch, n);
        while out.len() < batch {
            if self.cursor == n {
                self.epoch += 1;
                self.cursor = 0;
                order = Self::order(seed, self.epoch, n);
            }
            out.push(order[self.cursor]);
            self.cursor += 1;
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    /// Completed optimisation steps.
    pub iteration: u64,
    pub sampler: Sampler,
    pub initial_loss: Option<f64>,
    pub above_count: u64,
    #[serde(skip)]
    pub momentum: Vec<Tensor>,
}

impl TrainState {
    pub fn new(model: &Detector) -> Self {
        Self {
            iteration: 0,
            sampler: Sampler::default(),
            initial_loss: None,
            above_count: 0,
            momentum: model
                .params
                .ids()
                .map(|id| {
                    let (r, c) = model.params.get(id).shape();
                    Tensor::zeros(r, c)
                })
                .collect(),
        }
    }
}

/// One run-log row.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    pub iter: u64,
    pub loss: LossValues,
    pub lr: f64,
}

pub const LOG_HEADER: &str = "iter,L_det_S,L_det_T,L_distill,L_total,lr";

impl LogRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.iter,
            self.loss.det_student,
            self.loss.det_teacher,
            self.loss.distill,
            self.loss.total,
            self.lr
        )
    }

    pub fn parse(line: &str) -> Option<Self> {
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 6 {
            return None;
        }
        let num = |k: usize| f[k].parse::<f64>().ok();
        Some(Self {
            iter: f[0].parse().ok()?,
            loss: LossValues {
                det_student: num(1)?,
                det_teacher: num(2)?,
                distill: num(3)?,
                total: num(4)?,
            },
            lr: num(5)?,
        })
    }
}

pub fn read_log(path: &Path) -> Result<Vec<LogRow>> {
    let file = File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    let mut rows = Vec::new();
    for (index, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        if index == 0 || line.trim().is_empty() {
            continue;
        }
        rows.push(LogRow::parse(&line).ok_or_else(|| Error::Record {
            path: path.to_path_buf(),
            index,
            reason: format!("malformed log row `{line}`"),
        })?);
    }
    Ok(rows)
}

/// Appends rows to a CSV log, writing the header for a new file.
pub struct RunLog {
    out: BufWriter<File>,
}

impl RunLog {
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
        let mut out = BufWriter::new(file);
        writeln!(out, "{LOG_HEADER}").map_err(|e| Error::io("writing run log", e))?;
        Ok(Self { out })
    }

    /// Opens an existing log, keeping only rows up to `iteration`.
    pub fn resume(path: &Path, iteration: u64) -> Result<Self> {
        let rows: Vec<LogRow> = if path.exists() {
            read_log(path)?.into_iter().filter(|r| r.iter <= iteration).collect()
        } else {
            Vec::new()
        };
        let mut log = Self::create(path)?;
        for r in &rows {
            log.append(r)?;
        }
        Ok(log)
    }

    pub fn append(&mut self, row: &LogRow) -> Result<()> {
        writeln!(self.out, "{}", row.to_csv()).map_err(|e| Error::io("writing run log", e))
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io("writing run log", e))
    }
}

pub struct Trainer<'d> {
    pub model: Detector,
    pub dc: DistillConfig,
    pub state: TrainState,
    pub data: &'d [Sample],
}

fn decays(name: &str) -> bool {
    name.ends_with(".weight")
}

impl<'d> Trainer<'d> {
    pub fn new(model: Detector, dc: DistillConfig, data: &'d [Sample]) -> Result<Self> {
        dc.validate()?;
        if data.is_empty() {
            return Err(Error::Input("training set is empty".into()));
        }
        let state = TrainState::new(&model);
        Ok(Self {
            model,
            dc,
            state,
            data,
        })
    }

    /// Loss components and gradients for the given sample indices.
    pub fn loss_and_grads(&self, indices: &[usize]) -> Result<(LossValues, Gradients)> {
        let batch: Vec<&Sample> = indices.iter().map(|&i| &self.data[i]).collect();
        let mut g = Graph::with_params(&self.model.params);
        let loss = self.model.total_loss(&mut g, &batch, &self.dc)?;
        let values = loss.values(&g);
        let grads = g.backward(loss.total).into_params();
        Ok((values, grads))
    }

    pub fn step(&mut self) -> Result<LogRow> {
        let it = self.state.iteration;
        let lr = self.dc.learning_rate(it);
        let indices = self
            .state
            .sampler
            .next_batch(self.dc.seed, self.data.len(), self.dc.batch_size);
        let (loss, mut grads) = self.loss_and_grads(&indices)?;
        let row = LogRow {
            iter: it + 1,
            loss,
            lr,
        };
        if !loss.total.is_finite() || !grads.all_finite() {
            return Err(Error::Divergence {
                iteration: it + 1,
                reason: format!("non-finite loss or gradient (L_total = {})", loss.total),
            });
        }
        let initial = *self.state.initial_loss.get_or_insert(loss.total);
        if loss.total > DIVERGENCE_RATIO * initial {
            self.state.above_count += 1;
            if self.state.above_count >= DIVERGENCE_PATIENCE {
                return Err(Error::Divergence {
                    iteration: it + 1,
                    reason: format!(
                        "L_total stayed above {DIVERGENCE_RATIO}x its initial value {initial:.4} for {DIVERGENCE_PATIENCE} iterations (now {:.4})",
                        loss.total
                    ),
                });
            }
        } else {
            self.state.above_count = 0;
        }
        if self.dc.max_grad_norm > 0.0 {
            let norm = grads.global_norm();
            if norm > self.dc.max_grad_norm {
                grads.scale(self.dc.max_grad_norm / norm);
            }
        }
        self.apply(&grads, lr);
        self.state.iteration += 1;
        Ok(row)
    }

    fn apply(&mut self, grads: &Gradients, lr: f64) {
        let ids: Vec<ParamId> = self.model.params.ids().collect();
        for id in ids {
            let decay = if decays(self.model.params.name(id)) {
                self.dc.weight_decay
            } else {
                0.0
            };
            let mu = self.dc.momentum;
            let v = &mut self.state.momentum[id.0];
            let w = self.model.params.get_mut(id);
            let g = grads.get(id);
            for k in 0..w.len() {
                let gk = g.map_or(0.0, |g| g.data()[k]) + decay * w.data()[k];
                let vk = mu * v.data()[k] + gk;
                v.data_mut()[k] = vk;
                w.data_mut()[k] -= lr * vk;
            }
        }
    }

    /// Runs until `target` completed iterations, logging every row and
    /// checkpointing per `dc.checkpoint_every` and at the end.
    pub fn run(
        &mut self,
        target: u64,
        log: &mut RunLog,
        checkpoint: Option<&Path>,
        mut on_row: impl FnMut(&LogRow),
    ) -> Result<()> {
        while self.state.iteration < target {
            let row = self.step();
            let row = match row {
                Ok(r) => r,
                Err(e) => {
                    log.flush()?;
                    return Err(e);
                }
            };
            log.append(&row)?;
            on_row(&row);
            if let Some(path) = checkpoint {
                let every = self.dc.checkpoint_every;
                if every > 0 && self.state.iteration.is_multiple_of(every) {
                    log.flush()?;
                    self.save(path)?;
                }
            }
        }
        log.flush()?;
        if let Some(path) = checkpoint {
            self.save(path)?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(path, &self.model, &self.dc, &self.state)
    }

    /// Restores the full training state from a checkpoint.
    pub fn resume(path: &Path, dc: Option<DistillConfig>, data: &'d [Sample]) -> Result<Self> {
        let ck = load_checkpoint(path)?;
        let dc = dc.unwrap_or(ck.distill);
        let mut t = Self::new(ck.model, dc, data)?;
        t.state = ck.state;
        Ok(t)
    }
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DYNDCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    config_hash: String,
    model: ModelConfig,
    distill: DistillConfig,
    state: TrainState,
    params: Vec<(String, usize, usize)>,
}

pub struct Checkpoint {
    pub model: Detector,
    pub distill: DistillConfig,
    pub state: TrainState,
    pub config_hash: String,
}

fn write_f64s(out: &mut impl Write, data: &[f64]) -> std::io::Result<()> {
    for v in data {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn save_checkpoint(path: &Path, model: &Detector, dc: &DistillConfig, state: &TrainState) -> Result<()> {
    let header = Header {
        config_hash: model.cfg.hash(),
        model: model.cfg.clone(),
        distill: dc.clone(),
        state: state.clone(),
        params: model
            .params
            .ids()
            .map(|id| {
                let (r, c) = model.params.get(id).shape();
                (model.params.name(id).to_string(), r, c)
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).expect("checkpoint header serializes");
    let tmp = path.with_extension("tmp");
    let ctx = |e| Error::io(format!("writing {}", tmp.display()), e);
    {
        let file = File::create(&tmp).map_err(ctx)?;
        let mut out = BufWriter::new(file);
        out.write_all(CHECKPOINT_MAGIC).map_err(ctx)?;
        out.write_all(&CHECKPOINT_VERSION.to_le_bytes()).map_err(ctx)?;
        out.write_all(&(json.len() as u64).to_le_bytes()).map_err(ctx)?;
        out.write_all(&json).map_err(ctx)?;
        for id in model.params.ids() {
            write_f64s(&mut out, model.params.get(id).data()).map_err(ctx)?;
        }
        for m in &state.momentum {
            write_f64s(&mut out, m.data()).map_err(ctx)?;
        }
        out.flush().map_err(ctx)?;
    }
    std::fs::rename(&tmp, path).map_err(|e| Error::io(format!("renaming to {}", path.display()), e))
}

fn read_f64s(input: &mut impl Read, n: usize) -> std::io::Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 8];
    input.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect())
}

/// Reads only the model configuration hash stored in a checkpoint.
pub fn checkpoint_hash(path: &Path) -> Result<String> {
    let (header, _) = read_header(path)?;
    Ok(header.config_hash)
}

fn read_header(path: &Path) -> Result<(Header, BufReader<File>)> {
    let file = File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    let mut input = BufReader::new(file);
    let bad = |what: &str| Error::Checkpoint(format!("{}: {what}", path.display()));
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let mut word = [0u8; 4];
    input.read_exact(&mut word).map_err(|_| bad("truncated header"))?;
    let version = u32::from_le_bytes(word);
    if version != CHECKPOINT_VERSION {
        return Err(bad(&format!(
            "checkpoint version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let mut len = [0u8; 8];
    input.read_exact(&mut len).map_err(|_| bad("truncated header"))?;
    let mut json = vec![0u8; u64::from_le_bytes(len) as usize];
    input.read_exact(&mut json).map_err(|_| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(&json).map_err(|e| bad(&e.to_string()))?;
    Ok((header, input))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let (header, mut input) = read_header(path)?;
    let bad = |what: String| Error::Checkpoint(format!("{}: {what}", path.display()));
    if header.model.hash() != header.config_hash {
        return Err(bad("stored configuration does not match its hash".into()));
    }
    let mut model = Detector::new(&header.model)?;
    let ids: Vec<ParamId> = model.params.ids().collect();
    if ids.len() != header.params.len() {
        return Err(bad(format!(
            "{} parameters stored, model has {}",
            header.params.len(),
            ids.len()
        )));
    }
    for (&id, (name, r, c)) in ids.iter().zip(&header.params) {
        if model.params.name(id) != name || model.params.get(id).shape() != (*r, *c) {
            return Err(bad(format!("parameter `{name}` does not match the model layout")));
        }
        let data = read_f64s(&mut input, r * c).map_err(|_| bad("truncated parameter data".into()))?;
        model.params.set(id, Tensor::from_vec(*r, *c, data));
    }
    let mut state = header.state;
    state.momentum = Vec::with_capacity(ids.len());
    for (_, r, c) in &header.params {
        let data = read_f64s(&mut input, r * c).map_err(|_| bad("truncated optimiser data".into()))?;
        state.momentum.push(Tensor::from_vec(*r, *c, data));
    }
    let mut rest = Vec::new();
    input.read_to_end(&mut rest).map_err(|e| Error::io("reading checkpoint", e))?;
    if !rest.is_empty() {
        return Err(bad(format!("{} trailing bytes", rest.len())));
    }
    Ok(Checkpoint {
        model,
        distill: header.distill,
        state,
        config_hash: header.config_hash,
    })
}
