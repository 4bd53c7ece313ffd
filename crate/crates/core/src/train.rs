//! End-to-end optimization: SGD with momentum and weight decay, a stepped
//! learning-rate schedule with distinct backbone/head rates, the epoch loop,
//! penalty-coefficient selection on the validation split, and checkpointing.

use crate::data::{flip_augment, Coin, DataSplits, Sample, SampleInput};
use crate::error::{Error, Result};
use crate::graph::{Graph, TensorId};
use crate::head::HeadMode;
use crate::loss::{mse_loss, pcr_loss, PcrConfig};
use crate::model::{model_forward, Model, ModelBinding, ModelInput};
use crate::num::Scalar;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::io::{Read, Write};

/// Training objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Mse,
    Pcr,
}

impl LossKind {
    pub fn token(&self) -> &'static str {
        match self {
            LossKind::Mse => "mse",
            LossKind::Pcr => "pcr",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mse" => Ok(LossKind::Mse),
            "pcr" => Ok(LossKind::Pcr),
            other => Err(Error::Config(format!(
                "unknown loss '{other}' (expected mse or pcr)"
            ))),
        }
    }
}

/// Optimizer and schedule settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimConfig {
    pub lr_backbone: f64,
    pub lr_head: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub drop_factor: f64,
    pub drop_at_epoch: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for OptimConfig {
    /// Desk-scale defaults; rates, momentum, and decay follow the standard
    /// fine-tuning recipe with a 10x drop for the final quarter.
    fn default() -> Self {
        OptimConfig {
            lr_backbone: 0.001,
            lr_head: 0.01,
            momentum: 0.9,
            weight_decay: 0.0005,
            epochs: 200,
            drop_factor: 10.0,
            drop_at_epoch: 150,
            batch_size: 8,
            seed: 42,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        if self.drop_at_epoch >= self.epochs {
            return Err(Error::Config(format!(
                "drop_at_epoch {} must be below epochs {}",
                self.drop_at_epoch, self.epochs
            )));
        }
        if !(self.lr_backbone > 0.0 && self.lr_backbone.is_finite())
            || !(self.lr_head > 0.0 && self.lr_head.is_finite())
        {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config("weight decay must be non-negative".into()));
        }
        if !(self.drop_factor > 0.0 && self.drop_factor.is_finite()) {
            return Err(Error::Config("drop factor must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        Ok(())
    }
}

/// One momentum-SGD update:
/// v ← momentum·v + grad + weight_decay·param; param ← param − lr·v.
pub fn sgd_step<T: Scalar>(
    param: &mut [T],
    grad: &[T],
    velocity: &mut [T],
    lr: T,
    momentum: T,
    weight_decay: T,
) -> Result<()> {
    if param.len() != grad.len() || param.len() != velocity.len() {
        return Err(Error::ShapeMismatch {
            op: "sgd_step",
            left: vec![param.len()],
            right: vec![grad.len(), velocity.len()],
        });
    }
    for ((p, &g), v) in param.iter_mut().zip(grad.iter()).zip(velocity.iter_mut()) {
        *v = momentum * *v + g + weight_decay * *p;
        *p = *p - lr * *v;
    }
    Ok(())
}

/// Learning rates in effect at `epoch`: base rates before `drop_at_epoch`,
/// divided by `drop_factor` at and after it.
pub fn lr_at(epoch: usize, cfg: &OptimConfig) -> Result<(f64, f64)> {
    if epoch >= cfg.epochs {
        return Err(Error::Contract(format!(
            "epoch {epoch} out of range 0..{}",
            cfg.epochs
        )));
    }
    if epoch < cfg.drop_at_epoch {
        Ok((cfg.lr_backbone, cfg.lr_head))
    } else {
        Ok((
            cfg.lr_backbone / cfg.drop_factor,
            cfg.lr_head / cfg.drop_factor,
        ))
    }
}

/// Everything one training run needs besides the model and data.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainSettings {
    pub mode: HeadMode,
    pub loss: LossKind,
    pub optim: OptimConfig,
    pub pcr: PcrConfig,
}

/// Loss values recorded at the end of each epoch. `val_loss` is NaN when the
/// validation split is empty.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

/// Optimizer state carried across epochs and checkpoints.
#[derive(Debug, Clone)]
pub struct TrainState<T> {
    /// Velocity buffers aligned with [`Model::named`].
    pub velocities: Vec<Vec<T>>,
    /// Index of the next epoch to run (= completed epoch count).
    pub next_epoch: usize,
}

impl<T: Scalar> TrainState<T> {
    pub fn fresh(model: &Model<T>) -> Self {
        TrainState {
            velocities: model
                .named()
                .iter()
                .map(|(_, t)| vec![T::zero(); t.len()])
                .collect(),
            next_epoch: 0,
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

// per-epoch stream derived from (seed, epoch) so a resumed run replays the
// exact shuffles and coin flips of an unbroken one
fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    splitmix64(seed ^ splitmix64(epoch as u64 + 1))
}

fn stack_predictions<T: Scalar>(g: &mut Graph<T>, preds: &[TensorId]) -> Result<TensorId> {
    let mut it = preds.iter();
    let mut acc = *it.next().expect("at least one prediction");
    for id in it {
        acc = g.concat(acc, *id)?;
    }
    let n = preds.len();
    let dims = g.values(acc).len() / n;
    g.reshape(acc, vec![n, dims])
}

fn targets_leaf<T: Scalar>(g: &mut Graph<T>, samples: &[&Sample]) -> Result<TensorId> {
    let mut values = Vec::with_capacity(samples.len() * 3);
    for s in samples {
        for x in s.label.as_array() {
            values.push(T::of_f64(x));
        }
    }
    g.constant(vec![samples.len(), 3], values)
}

fn loss_node<T: Scalar>(
    g: &mut Graph<T>,
    preds: TensorId,
    targets: TensorId,
    settings: &TrainSettings,
) -> Result<TensorId> {
    match settings.loss {
        LossKind::Mse => mse_loss(g, preds, targets),
        LossKind::Pcr => pcr_loss(g, preds, targets, &settings.pcr),
    }
}

fn forward_sample<T: Scalar>(
    g: &mut Graph<T>,
    model: &Model<T>,
    binding: &ModelBinding,
    sample: &Sample,
    flip: bool,
    mode: HeadMode,
) -> Result<TensorId> {
    match &sample.input {
        SampleInput::Image(img) => {
            let prepared = if flip {
                flip_augment(img, Coin::Heads)
            } else {
                img.clone()
            };
            let out = model_forward(g, model, binding, &ModelInput::Image(&prepared), mode)?;
            Ok(out.prediction)
        }
        SampleInput::Features(fm) => {
            let out = model_forward(g, model, binding, &ModelInput::Features(fm), mode)?;
            Ok(out.prediction)
        }
    }
}

/// Mean loss of `samples` under the current parameters, without augmentation
/// or updates.
pub fn dataset_loss<T: Scalar>(
    model: &Model<T>,
    samples: &[Sample],
    settings: &TrainSettings,
) -> Result<f64> {
    if samples.is_empty() {
        return Ok(f64::NAN);
    }
    let mut total = 0.0;
    for chunk in samples.chunks(settings.optim.batch_size.max(1)) {
        let mut g = Graph::new();
        let binding = ModelBinding::bind(&mut g, model);
        let mut preds = Vec::with_capacity(chunk.len());
        for s in chunk {
            preds.push(forward_sample(&mut g, model, &binding, s, false, settings.mode)?);
        }
        let stacked = stack_predictions(&mut g, &preds)?;
        let refs: Vec<&Sample> = chunk.iter().collect();
        let targets = targets_leaf(&mut g, &refs)?;
        let loss = loss_node(&mut g, stacked, targets, settings)?;
        total += g.values(loss)[0].as_f64() * chunk.len() as f64;
    }
    Ok(total / samples.len() as f64)
}

/// Predictions for every sample under the current parameters.
pub fn predict_samples<T: Scalar>(
    model: &Model<T>,
    samples: &[Sample],
    mode: HeadMode,
) -> Result<Vec<[f64; 3]>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(32) {
        let mut g = Graph::new();
        let binding = ModelBinding::bind(&mut g, model);
        for s in chunk {
            let pred = forward_sample(&mut g, model, &binding, s, false, mode)?;
            let v = g.values(pred);
            out.push([v[0].as_f64(), v[1].as_f64(), v[2].as_f64()]);
        }
    }
    Ok(out)
}

/// Run (or resume) training. Returns per-epoch history for the epochs this
/// call executed and the final optimizer state; the model is updated in
/// place. Deterministic given the seed: batch order and augmentation coins
/// come from per-epoch streams derived from `(seed, epoch)`.
pub fn train<T: Scalar>(
    model: &mut Model<T>,
    data: &DataSplits,
    settings: &TrainSettings,
    state: Option<TrainState<T>>,
) -> Result<(Vec<EpochStats>, TrainState<T>)> {
    settings.optim.validate()?;
    if data.train.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    let mut state = state.unwrap_or_else(|| TrainState::fresh(model));
    {
        let named = model.named();
        if state.velocities.len() != named.len()
            || state
                .velocities
                .iter()
                .zip(named.iter())
                .any(|(v, (_, t))| v.len() != t.len())
        {
            return Err(Error::Config(
                "optimizer state does not match model parameters".into(),
            ));
        }
    }
    if state.next_epoch > settings.optim.epochs {
        return Err(Error::Config(format!(
            "checkpoint is at epoch {}, beyond configured epochs {}",
            state.next_epoch, settings.optim.epochs
        )));
    }

    let momentum = T::of_f64(settings.optim.momentum);
    let weight_decay = T::of_f64(settings.optim.weight_decay);
    let mut history = Vec::with_capacity(settings.optim.epochs - state.next_epoch);

    for epoch in state.next_epoch..settings.optim.epochs {
        let (lr_backbone, lr_head) = lr_at(epoch, &settings.optim)?;
        let (lr_b, lr_h) = (T::of_f64(lr_backbone), T::of_f64(lr_head));

        let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed(settings.optim.seed, epoch));
        let n = data.train.len();
        let mut order: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }

        let mut epoch_loss = 0.0;
        for (batch_idx, chunk) in order.chunks(settings.optim.batch_size).enumerate() {
            let mut g = Graph::new();
            let binding = ModelBinding::bind(&mut g, model);
            let mut preds = Vec::with_capacity(chunk.len());
            let mut refs = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let flip = rng.gen_bool(0.5);
                let sample = &data.train[i];
                preds.push(forward_sample(&mut g, model, &binding, sample, flip, settings.mode)?);
                refs.push(sample);
            }
            let stacked = stack_predictions(&mut g, &preds)?;
            let targets = targets_leaf(&mut g, &refs)?;
            let loss = loss_node(&mut g, stacked, targets, settings)?;
            let loss_value = g.values(loss)[0].as_f64();
            if !loss_value.is_finite() {
                return Err(Error::Training {
                    epoch,
                    batch: batch_idx,
                    what: format!("loss became non-finite ({loss_value})"),
                });
            }
            g.backward(loss)?;

            let ids = binding.named();
            let mut params = model.named_mut();
            for (slot, (name, id)) in ids.iter().enumerate() {
                let grad = g.grad(*id).expect("bound parameters accumulate gradients");
                let lr = if name.starts_with("backbone.") {
                    lr_b
                } else {
                    lr_h
                };
                sgd_step(
                    &mut params[slot].1.values,
                    grad,
                    &mut state.velocities[slot],
                    lr,
                    momentum,
                    weight_decay,
                )?;
            }
            epoch_loss += loss_value * chunk.len() as f64;
        }

        let train_loss = epoch_loss / n as f64;
        let val_loss = dataset_loss(model, &data.val, settings)?;
        history.push(EpochStats {
            epoch,
            train_loss,
            val_loss,
        });
        state.next_epoch = epoch + 1;
    }
    Ok((history, state))
}

/// One row of the penalty-coefficient search table.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LambdaRow {
    pub lambda: f64,
    pub val_mse: f64,
}

/// Train one model per distinct grid value (identical seed via `factory`),
/// evaluate the validation mean MSE, and return the argmin with ties broken
/// toward the smaller coefficient. Candidate runs execute on parallel
/// threads; the table order is the deduplicated ascending grid.
pub fn select_lambda<T, F>(
    factory: F,
    data: &DataSplits,
    grid: &[f64],
    base: &TrainSettings,
) -> Result<(f64, Vec<LambdaRow>)>
where
    T: Scalar,
    F: Fn() -> Result<Model<T>> + Sync,
{
    if grid.is_empty() {
        return Err(Error::Config("lambda grid is empty".into()));
    }
    for &l in grid {
        if !(l >= 0.0 && l.is_finite()) {
            return Err(Error::Config(format!(
                "lambda grid values must be non-negative, got {l}"
            )));
        }
    }
    if data.val.is_empty() {
        return Err(Error::Config(
            "lambda selection needs a non-empty validation split".into(),
        ));
    }
    let mut lambdas = grid.to_vec();
    lambdas.sort_by(f64::total_cmp);
    lambdas.dedup();

    let mut rows: Vec<Option<Result<LambdaRow>>> = Vec::new();
    rows.resize_with(lambdas.len(), || None);
    std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for (slot, &lambda) in lambdas.iter().enumerate() {
            let factory = &factory;
            handles.push((
                slot,
                scope.spawn(move || -> Result<LambdaRow> {
                    let mut model = factory()?;
                    let mut settings = *base;
                    settings.loss = LossKind::Pcr;
                    settings.pcr.lambda = lambda;
                    train(&mut model, data, &settings, None)?;
                    let preds = predict_samples(&model, &data.val, settings.mode)?;
                    let gts: Vec<_> = data.val.iter().map(|s| s.label).collect();
                    let (_, val_mse) = crate::eval::mse_metric(&preds, &gts)?;
                    Ok(LambdaRow { lambda, val_mse })
                }),
            ));
        }
        for (slot, handle) in handles {
            rows[slot] = Some(handle.join().expect("lambda worker must not panic"));
        }
    });

    let mut table = Vec::with_capacity(rows.len());
    for row in rows {
        table.push(row.expect("every slot filled")?);
    }
    let mut best = table[0];
    for row in &table[1..] {
        if row.val_mse < best.val_mse {
            best = *row;
        }
    }
    Ok((best.lambda, table))
}

// ── checkpoint format ───────────────────────────────────────────────────
//
// magic "PDCK", little-endian u16 version, u32 blob count, then per blob:
// u16 name length, name bytes, u8 rank, rank u32 dims, then the values as
// little-endian f64. Parameters are stored under "param/", optimizer
// velocities under "vel/", the epoch counter and model structure under
// "meta/", and the numeric config echo under "cfg/".

const CHECKPOINT_MAGIC: &[u8; 4] = b"PDCK";
pub const CHECKPOINT_VERSION: u16 = 1;

/// One named tensor inside a checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct Blob {
    pub name: String,
    pub dims: Vec<usize>,
    pub values: Vec<f64>,
}

/// Parsed checkpoint contents.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub blobs: Vec<Blob>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Blob> {
        self.blobs.iter().find(|b| b.name == name)
    }

    pub fn scalar(&self, name: &str) -> Result<f64> {
        let blob = self.get(name).ok_or_else(|| Error::Format {
            what: format!("missing checkpoint entry '{name}'"),
            offset: None,
        })?;
        if blob.values.len() != 1 {
            return Err(Error::Format {
                what: format!("'{name}' is not a scalar entry"),
                offset: None,
            });
        }
        Ok(blob.values[0])
    }

    pub fn write_to(&self, sink: &mut impl Write) -> Result<()> {
        sink.write_all(CHECKPOINT_MAGIC)?;
        sink.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        sink.write_all(&(self.blobs.len() as u32).to_le_bytes())?;
        for blob in &self.blobs {
            let name = blob.name.as_bytes();
            if name.len() > u16::MAX as usize {
                return Err(Error::Contract(format!(
                    "blob name too long: {}",
                    blob.name
                )));
            }
            if blob.dims.len() > u8::MAX as usize {
                return Err(Error::Contract(format!(
                    "blob rank too large: {}",
                    blob.dims.len()
                )));
            }
            sink.write_all(&(name.len() as u16).to_le_bytes())?;
            sink.write_all(name)?;
            sink.write_all(&[blob.dims.len() as u8])?;
            for &d in &blob.dims {
                sink.write_all(&(d as u32).to_le_bytes())?;
            }
            let expect: usize = blob.dims.iter().product();
            debug_assert_eq!(blob.values.len(), expect);
            for v in &blob.values {
                sink.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(source: &mut impl Read) -> Result<Self> {
        let mut r = CountingReader { source, pos: 0 };
        let mut magic = [0u8; 4];
        r.take(&mut magic, "magic")?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format {
                what: format!("bad magic bytes {magic:?}, expected \"PDCK\""),
                offset: Some(0),
            });
        }
        let mut v = [0u8; 2];
        r.take(&mut v, "version")?;
        let version = u16::from_le_bytes(v);
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format {
                what: format!("unsupported checkpoint version {version}"),
                offset: Some(4),
            });
        }
        let mut c = [0u8; 4];
        r.take(&mut c, "blob count")?;
        let count = u32::from_le_bytes(c) as usize;
        let mut blobs = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let mut nl = [0u8; 2];
            r.take(&mut nl, "name length")?;
            let name_len = u16::from_le_bytes(nl) as usize;
            let mut name_bytes = vec![0u8; name_len];
            r.take(&mut name_bytes, "name")?;
            let name = String::from_utf8(name_bytes).map_err(|_| Error::Format {
                what: "blob name is not UTF-8".into(),
                offset: Some(r.pos),
            })?;
            let mut rank = [0u8; 1];
            r.take(&mut rank, "rank")?;
            let mut dims = Vec::with_capacity(rank[0] as usize);
            for _ in 0..rank[0] {
                let mut d = [0u8; 4];
                r.take(&mut d, "dimension")?;
                dims.push(u32::from_le_bytes(d) as usize);
            }
            let len: usize = dims.iter().product();
            if len as u64 > (1 << 28) {
                return Err(Error::Format {
                    what: format!("blob '{name}' dimension overflow"),
                    offset: Some(r.pos),
                });
            }
            let mut values = Vec::with_capacity(len);
            for _ in 0..len {
                let mut b = [0u8; 8];
                r.take(&mut b, "value")?;
                values.push(f64::from_le_bytes(b));
            }
            blobs.push(Blob { name, dims, values });
        }
        Ok(Checkpoint { blobs })
    }
}

struct CountingReader<'a, R: Read> {
    source: &'a mut R,
    pos: u64,
}

impl<R: Read> CountingReader<'_, R> {
    fn take(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        let at = self.pos;
        self.source.read_exact(buf).map_err(|_| Error::Format {
            what: format!("truncated checkpoint while reading {what}"),
            offset: Some(at),
        })?;
        self.pos += buf.len() as u64;
        Ok(())
    }
}

fn scalar_blob(name: &str, value: f64) -> Blob {
    Blob {
        name: name.to_string(),
        dims: vec![],
        values: vec![value],
    }
}

/// Build a checkpoint from a model, its optimizer state, and a numeric
/// config echo (written under "cfg/").
pub fn checkpoint_from_model<T: Scalar>(
    model: &Model<T>,
    state: &TrainState<T>,
    config_echo: &[(String, f64)],
) -> Checkpoint {
    let mut blobs = Vec::new();
    blobs.push(scalar_blob("meta/epoch", state.next_epoch as f64));
    blobs.push(scalar_blob("meta/feat_h", model.dims.height as f64));
    blobs.push(scalar_blob("meta/feat_w", model.dims.width as f64));
    blobs.push(scalar_blob("meta/feat_n", model.dims.channels as f64));
    match &model.backbone {
        Some(b) => {
            blobs.push(scalar_blob("meta/has_backbone", 1.0));
            blobs.push(scalar_blob("meta/input_c", b.config.input_channels as f64));
            blobs.push(scalar_blob("meta/input_h", b.config.input_height as f64));
            blobs.push(scalar_blob("meta/input_w", b.config.input_width as f64));
            blobs.push(scalar_blob("meta/n_stages", b.config.stages.len() as f64));
            for (i, s) in b.config.stages.iter().enumerate() {
                blobs.push(scalar_blob(
                    &format!("meta/stage{i}.out_channels"),
                    s.out_channels as f64,
                ));
                blobs.push(scalar_blob(&format!("meta/stage{i}.kernel"), s.kernel as f64));
                blobs.push(scalar_blob(&format!("meta/stage{i}.stride"), s.stride as f64));
                blobs.push(scalar_blob(&format!("meta/stage{i}.pad"), s.pad as f64));
            }
        }
        None => blobs.push(scalar_blob("meta/has_backbone", 0.0)),
    }
    for (name, value) in config_echo {
        blobs.push(scalar_blob(&format!("cfg/{name}"), *value));
    }
    for ((name, tensor), velocity) in model.named().iter().zip(state.velocities.iter()) {
        blobs.push(Blob {
            name: format!("param/{name}"),
            dims: tensor.shape.clone(),
            values: tensor.values.iter().map(|v| v.as_f64()).collect(),
        });
        blobs.push(Blob {
            name: format!("vel/{name}"),
            dims: tensor.shape.clone(),
            values: velocity.iter().map(|v| v.as_f64()).collect(),
        });
    }
    Checkpoint { blobs }
}

fn meta_usize(ckpt: &Checkpoint, name: &str) -> Result<usize> {
    let v = ckpt.scalar(name)?;
    if v < 0.0 || v.fract() != 0.0 {
        return Err(Error::Format {
            what: format!("'{name}' must be a non-negative integer, got {v}"),
            offset: None,
        });
    }
    Ok(v as usize)
}

/// Reconstruct the model and optimizer state a checkpoint describes.
/// Every parameter and velocity must be present with matching shape.
pub fn restore_model<T: Scalar>(ckpt: &Checkpoint) -> Result<(Model<T>, TrainState<T>)> {
    use crate::backbone::{BackboneConfig, StageSpec};
    use crate::graph::Activation;
    use crate::head::FeatureDims;
    use crate::model::ModelConfig;

    let dims = FeatureDims::new(
        meta_usize(ckpt, "meta/feat_h")?,
        meta_usize(ckpt, "meta/feat_w")?,
        meta_usize(ckpt, "meta/feat_n")?,
    )?;
    let config = if ckpt.scalar("meta/has_backbone")? != 0.0 {
        let n_stages = meta_usize(ckpt, "meta/n_stages")?;
        let mut stages = Vec::with_capacity(n_stages);
        for i in 0..n_stages {
            stages.push(StageSpec {
                out_channels: meta_usize(ckpt, &format!("meta/stage{i}.out_channels"))?,
                kernel: meta_usize(ckpt, &format!("meta/stage{i}.kernel"))?,
                stride: meta_usize(ckpt, &format!("meta/stage{i}.stride"))?,
                pad: meta_usize(ckpt, &format!("meta/stage{i}.pad"))?,
                activation: Activation::Tanh,
            });
        }
        ModelConfig::WithBackbone(BackboneConfig {
            input_channels: meta_usize(ckpt, "meta/input_c")?,
            input_height: meta_usize(ckpt, "meta/input_h")?,
            input_width: meta_usize(ckpt, "meta/input_w")?,
            stages,
        })
    } else {
        ModelConfig::HeadOnly(dims)
    };
    if config.feature_dims()? != dims {
        return Err(Error::Format {
            what: "checkpoint feature dims disagree with backbone structure".into(),
            offset: None,
        });
    }

    let mut model = Model::<T>::init(&config, 0)?;
    let mut velocities = Vec::new();
    for (name, tensor) in model.named_mut() {
        let pblob = ckpt.get(&format!("param/{name}")).ok_or_else(|| Error::Format {
            what: format!("missing parameter 'param/{name}'"),
            offset: None,
        })?;
        if pblob.dims != tensor.shape {
            return Err(Error::Format {
                what: format!(
                    "parameter '{name}' has shape {:?}, expected {:?}",
                    pblob.dims, tensor.shape
                ),
                offset: None,
            });
        }
        tensor.values = pblob.values.iter().map(|&v| T::of_f64(v)).collect();
        let vblob = ckpt.get(&format!("vel/{name}")).ok_or_else(|| Error::Format {
            what: format!("missing velocity 'vel/{name}'"),
            offset: None,
        })?;
        if vblob.dims != tensor.shape {
            return Err(Error::Format {
                what: format!("velocity '{name}' shape mismatch"),
                offset: None,
            });
        }
        velocities.push(vblob.values.iter().map(|&v| T::of_f64(v)).collect());
    }
    let next_epoch = meta_usize(ckpt, "meta/epoch")?;
    Ok((
        model,
        TrainState {
            velocities,
            next_epoch,
        },
    ))
}

pub fn save_checkpoint_file(ckpt: &Checkpoint, path: &std::path::Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    ckpt.write_to(&mut f)
}

pub fn load_checkpoint_file(path: &std::path::Path) -> Result<Checkpoint> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    Checkpoint::read_from(&mut f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SplitSpec;
    use crate::head::FeatureDims;
    use crate::model::ModelConfig;

    #[test]
    fn sgd_fixed_point_with_zero_grad() {
        let mut p = vec![1.0f64, -2.0];
        let mut v = vec![0.0, 0.0];
        sgd_step(&mut p, &[0.0, 0.0], &mut v, 0.1, 0.9, 0.0).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);
        assert_eq!(v, vec![0.0, 0.0]);
    }

    #[test]
    fn sgd_direct_substitution() {
        let mut p = vec![1.0f64];
        let mut v = vec![0.0];
        sgd_step(&mut p, &[0.5], &mut v, 0.1, 0.9, 0.0).unwrap();
        assert!((p[0] - 0.95).abs() < 1e-15);
        assert!((v[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn sgd_two_steps_match_scalar_oracle() {
        let (lr, momentum, wd) = (0.05f64, 0.9, 0.01);
        let grads = [0.3f64, -0.2];
        let mut p = vec![0.7f64];
        let mut v = vec![0.0f64];
        for g in grads {
            sgd_step(&mut p, &[g], &mut v, lr, momentum, wd).unwrap();
        }
        // hand-rolled scalar loop
        let (mut po, mut vo) = (0.7f64, 0.0f64);
        for g in grads {
            vo = momentum * vo + g + wd * po;
            po -= lr * vo;
        }
        assert!((p[0] - po).abs() < 1e-12);
        assert!((v[0] - vo).abs() < 1e-12);
    }

    #[test]
    fn sgd_shape_mismatch_errors() {
        let mut p = vec![1.0f64];
        let mut v = vec![0.0, 0.0];
        assert!(sgd_step(&mut p, &[0.1], &mut v, 0.1, 0.9, 0.0).is_err());
    }

    #[test]
    fn lr_schedule_examples() {
        // full-scale protocol: rates 0.001/0.01, 300 epochs, drop for the
        // last 50
        let cfg = OptimConfig {
            lr_backbone: 0.001,
            lr_head: 0.01,
            epochs: 300,
            drop_at_epoch: 250,
            ..OptimConfig::default()
        };
        assert_eq!(lr_at(0, &cfg).unwrap(), (0.001, 0.01));
        assert_eq!(lr_at(249, &cfg).unwrap(), (0.001, 0.01));
        let (b, h) = lr_at(250, &cfg).unwrap();
        assert!((b - 0.0001).abs() < 1e-12);
        assert!((h - 0.001).abs() < 1e-12);
        assert!(lr_at(300, &cfg).is_err());
        let flat = OptimConfig {
            drop_factor: 1.0,
            ..cfg
        };
        assert_eq!(lr_at(0, &flat).unwrap(), lr_at(299, &flat).unwrap());
    }

    #[test]
    fn optim_config_validation() {
        let ok = OptimConfig::default();
        assert!(ok.validate().is_ok());
        assert!(OptimConfig { epochs: 0, ..ok }.validate().is_err());
        assert!(OptimConfig {
            drop_at_epoch: 200,
            ..ok
        }
        .validate()
        .is_err());
        assert!(OptimConfig {
            momentum: 1.0,
            ..ok
        }
        .validate()
        .is_err());
        assert!(OptimConfig {
            batch_size: 0,
            ..ok
        }
        .validate()
        .is_err());
    }

    fn small_setup(seed: u64) -> (Model<f64>, DataSplits, TrainSettings) {
        let dims = FeatureDims::new(2, 2, 4).unwrap();
        let model = Model::init(&ModelConfig::HeadOnly(dims), seed).unwrap();
        // head-only training on synthetic feature maps derived from labels
        let samples = feature_samples(dims, 24, seed);
        let spec = SplitSpec::new(0.7, 0.1, 0.2, seed).unwrap();
        let (train, val, test) = crate::data::split(&samples, &spec).unwrap();
        let settings = TrainSettings {
            mode: HeadMode::Coupled,
            loss: LossKind::Mse,
            optim: OptimConfig {
                epochs: 4,
                drop_at_epoch: 3,
                batch_size: 4,
                seed,
                ..OptimConfig::default()
            },
            pcr: PcrConfig::default(),
        };
        (model, DataSplits { train, val, test }, settings)
    }

    fn feature_samples(dims: FeatureDims, count: usize, seed: u64) -> Vec<Sample> {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count)
            .map(|i| {
                let values: Vec<f32> = (0..dims.channels * dims.locations())
                    .map(|_| rng.gen::<f32>() * 2.0 - 1.0)
                    .collect();
                let label = crate::loss::VadLabel::new(rng.gen(), rng.gen(), rng.gen()).unwrap();
                Sample {
                    id: format!("feat-{i}"),
                    input: SampleInput::Features(
                        crate::head::FeatureMap::new(dims, values).unwrap(),
                    ),
                    label,
                }
            })
            .collect()
    }

    #[test]
    fn training_is_bitwise_reproducible() {
        let (mut m1, data, settings) = small_setup(5);
        let (h1, _) = train(&mut m1, &data, &settings, None).unwrap();
        let (mut m2, data2, settings2) = small_setup(5);
        let (h2, _) = train(&mut m2, &data2, &settings2, None).unwrap();
        assert_eq!(h1, h2);
        for ((_, a), (_, b)) in m1.named().iter().zip(m2.named().iter()) {
            assert_eq!(a.values, b.values);
        }
    }

    #[test]
    fn pcr_with_zero_lambda_reproduces_mse_history_bitwise() {
        let (mut m1, data, mut settings) = small_setup(6);
        settings.loss = LossKind::Mse;
        let (h1, _) = train(&mut m1, &data, &settings, None).unwrap();
        let (mut m2, data2, mut settings2) = small_setup(6);
        settings2.loss = LossKind::Pcr;
        settings2.pcr = PcrConfig::new(0.0, 0.5).unwrap();
        let (h2, _) = train(&mut m2, &data2, &settings2, None).unwrap();
        for (a, b) in h1.iter().zip(h2.iter()) {
            assert_eq!(a.train_loss.to_bits(), b.train_loss.to_bits());
            assert_eq!(a.val_loss.to_bits(), b.val_loss.to_bits());
        }
        for ((_, a), (_, b)) in m1.named().iter().zip(m2.named().iter()) {
            assert_eq!(a.values, b.values);
        }
    }

    #[test]
    fn resume_equals_unbroken_run() {
        // drop_at sits inside the shared prefix so both configs use the same
        // learning rate at every epoch
        let (mut full, data, mut settings) = small_setup(7);
        settings.optim.epochs = 4;
        settings.optim.drop_at_epoch = 1;
        train(&mut full, &data, &settings, None).unwrap();

        let (mut half, data2, _) = small_setup(7);
        let mut first_leg = settings;
        first_leg.optim.epochs = 2;
        let (_, state) = train(&mut half, &data2, &first_leg, None).unwrap();

        let ckpt = checkpoint_from_model(&half, &state, &[]);
        let mut buf = Vec::new();
        ckpt.write_to(&mut buf).unwrap();
        let loaded = Checkpoint::read_from(&mut buf.as_slice()).unwrap();
        let (mut resumed, state) = restore_model::<f64>(&loaded).unwrap();
        assert_eq!(state.next_epoch, 2);
        train(&mut resumed, &data2, &settings, Some(state)).unwrap();

        for ((_, a), (_, b)) in full.named().iter().zip(resumed.named().iter()) {
            assert_eq!(a.values, b.values, "resume must be bitwise equivalent");
        }
    }

    #[test]
    fn empty_train_split_is_config_error() {
        let (mut model, mut data, settings) = small_setup(8);
        data.train.clear();
        assert!(train(&mut model, &data, &settings, None).is_err());
    }

    #[test]
    fn checkpoint_round_trip_bitwise() {
        let (mut model, data, settings) = small_setup(9);
        let (_, state) = train(&mut model, &data, &settings, None).unwrap();
        let ckpt = checkpoint_from_model(&model, &state, &[("seed".into(), 9.0)]);
        let mut buf = Vec::new();
        ckpt.write_to(&mut buf).unwrap();
        let loaded = Checkpoint::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(ckpt, loaded);
        let (restored, rstate) = restore_model::<f64>(&loaded).unwrap();
        for ((_, a), (_, b)) in model.named().iter().zip(restored.named().iter()) {
            assert_eq!(a.values, b.values);
        }
        for (a, b) in state.velocities.iter().zip(rstate.velocities.iter()) {
            assert_eq!(a, b);
        }
        assert!((loaded.scalar("cfg/seed").unwrap() - 9.0).abs() < 1e-15);
    }

    #[test]
    fn truncated_checkpoint_is_format_error() {
        let (mut model, data, settings) = small_setup(10);
        let (_, state) = train(&mut model, &data, &settings, None).unwrap();
        let ckpt = checkpoint_from_model(&model, &state, &[]);
        let mut buf = Vec::new();
        ckpt.write_to(&mut buf).unwrap();
        buf.truncate(buf.len() - 7);
        match Checkpoint::read_from(&mut buf.as_slice()) {
            Err(Error::Format { .. }) => {}
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn missing_parameter_is_named_in_error() {
        let (mut model, data, settings) = small_setup(11);
        let (_, state) = train(&mut model, &data, &settings, None).unwrap();
        let mut ckpt = checkpoint_from_model(&model, &state, &[]);
        ckpt.blobs
            .retain(|b| b.name != "param/head.spatial_proj");
        match restore_model::<f64>(&ckpt) {
            Err(Error::Format { what, .. }) => {
                assert!(what.contains("head.spatial_proj"), "{what}")
            }
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn select_lambda_singleton_and_dedup() {
        let (_, data, settings) = small_setup(12);
        let dims = FeatureDims::new(2, 2, 4).unwrap();
        let factory = || Model::<f64>::init(&ModelConfig::HeadOnly(dims), 12);
        let (best, table) = select_lambda(factory, &data, &[0.0], &settings).unwrap();
        assert_eq!(best, 0.0);
        assert_eq!(table.len(), 1);

        let (_, table) =
            select_lambda(factory, &data, &[1.0, 0.5, 1.0, 0.5], &settings).unwrap();
        assert_eq!(table.len(), 2);
        assert_eq!(table[0].lambda, 0.5);
        assert_eq!(table[1].lambda, 1.0);
    }

    #[test]
    fn select_lambda_returns_table_argmin() {
        let (_, data, settings) = small_setup(13);
        let dims = FeatureDims::new(2, 2, 4).unwrap();
        let factory = || Model::<f64>::init(&ModelConfig::HeadOnly(dims), 13);
        let (best, table) =
            select_lambda(factory, &data, &[0.0, 0.5, 2.0], &settings).unwrap();
        let min = table
            .iter()
            .map(|r| r.val_mse)
            .fold(f64::INFINITY, f64::min);
        let row = table.iter().find(|r| r.lambda == best).unwrap();
        assert_eq!(row.val_mse, min);
        for r in &table {
            if r.val_mse == min {
                assert!(best <= r.lambda, "ties must break toward smaller lambda");
            }
        }
    }

    #[test]
    fn empty_grid_is_config_error() {
        let (_, data, settings) = small_setup(14);
        let dims = FeatureDims::new(2, 2, 4).unwrap();
        let factory = || Model::<f64>::init(&ModelConfig::HeadOnly(dims), 14);
        assert!(select_lambda(factory, &data, &[], &settings).is_err());
    }

    #[test]
    fn training_reduces_loss_on_learnable_features() {
        // labels linearly encoded in the feature map: the head must fit them
        let dims = FeatureDims::new(2, 2, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let samples: Vec<Sample> = (0..48)
            .map(|i| {
                use rand::Rng;
                let label = crate::loss::VadLabel::new(
                    rng.gen::<f64>(),
                    rng.gen::<f64>(),
                    rng.gen::<f64>(),
                )
                .unwrap();
                let mut values = vec![0.0f32; dims.channels * dims.locations()];
                for (j, v) in values.iter_mut().enumerate() {
                    let which = j % 3;
                    *v = label.as_array()[which] as f32 - 0.5;
                }
                Sample {
                    id: format!("lin-{i}"),
                    input: SampleInput::Features(
                        crate::head::FeatureMap::new(dims, values).unwrap(),
                    ),
                    label,
                }
            })
            .collect();
        let spec = SplitSpec::new(0.7, 0.1, 0.2, 15).unwrap();
        let (train_s, val, test) = crate::data::split(&samples, &spec).unwrap();
        let data = DataSplits {
            train: train_s,
            val,
            test,
        };
        let mut model = Model::<f64>::init(&ModelConfig::HeadOnly(dims), 15).unwrap();
        let settings = TrainSettings {
            mode: HeadMode::Coupled,
            loss: LossKind::Mse,
            optim: OptimConfig {
                epochs: 60,
                drop_at_epoch: 45,
                batch_size: 8,
                seed: 15,
                ..OptimConfig::default()
            },
            pcr: PcrConfig::default(),
        };
        let (history, _) = train(&mut model, &data, &settings, None).unwrap();
        let first = history.first().unwrap().train_loss;
        let last = history.last().unwrap().train_loss;
        assert!(
            last < first / 4.0,
            "loss should drop substantially: {first} -> {last}"
        );
    }
}
