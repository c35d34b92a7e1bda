//! The training run loop: data loading, epoch iteration, checkpointing,
//! resumption, and the automatic final evaluation.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::Array1;

use super::checkpoint::{load_checkpoint, save_checkpoint, CheckpointBody, CHECKPOINT_VERSION};
use super::metrics_log::{EpochRecord, MetricsLog};
use super::step::{train_step, TrainImage};
use super::{derived_rng, lr_schedule, DatasetSpec, IdentityIndex, TrainConfig};
use crate::data::{
    build_search_protocol, image_to_array, load_annotations, synth_generate, AnnotationSet,
    ImageStore, SearchProtocol, Split,
};
use crate::error::{CoreError, Result};
use crate::eval::{
    detection_recall_ap, evaluate_stratified, search_map_cmc, Detection, MetricReport,
    IOU_THRESHOLD,
};
use crate::loss::OimState;
use crate::model::{GtBox, SearchModel};
use crate::nn::{ParamStore, Sgd};

/// Loaded dataset: both splits plus pixel data.
pub struct TrainData {
    pub train: AnnotationSet,
    pub test: AnnotationSet,
    pub images: ImageStore,
}

impl TrainData {
    pub fn load(spec: &DatasetSpec) -> Result<TrainData> {
        match spec {
            DatasetSpec::Files { train_annotations, test_annotations, images_dir } => {
                let train = load_annotations(train_annotations, Split::Train)?;
                let test = load_annotations(test_annotations, Split::Test)?;
                let mut images = ImageStore::load_for(&train, images_dir)?;
                let test_images = ImageStore::load_for(&test, images_dir)?;
                for file in test_images.files() {
                    if images.get(file).is_none() {
                        images.insert(file.clone(), test_images.get(file).unwrap().clone());
                    }
                }
                Ok(TrainData { train, test, images })
            }
            DatasetSpec::Synth { synth } => {
                let data = synth_generate(synth)?;
                Ok(TrainData { train: data.train, test: data.test, images: data.images })
            }
        }
    }

    fn pixels(&self, file: &str) -> Result<ndarray::Array3<f64>> {
        let img = self
            .images
            .get(file)
            .ok_or_else(|| CoreError::InvalidArgument(format!("missing pixel data for '{file}'")))?;
        Ok(image_to_array(img))
    }
}

/// Owns everything mutable about a run.
pub struct Trainer {
    pub config: TrainConfig,
    pub model: SearchModel,
    pub store: ParamStore,
    pub optimizer: Sgd,
    pub oim_student: OimState,
    pub oim_teacher: Option<OimState>,
    pub identity_index: IdentityIndex,
    /// Epochs already completed.
    pub completed_epochs: usize,
    pub history: Vec<EpochRecord>,
}

impl Trainer {
    pub fn new(config: TrainConfig, data: &TrainData) -> Result<Trainer> {
        config.validate()?;
        let identity_index =
            IdentityIndex::from_ids(data.train.identity_universe().iter().copied());
        if identity_index.is_empty() {
            return Err(CoreError::Config(
                "training set has no labeled identities; OIM cannot be sized".into(),
            ));
        }
        let mut store = ParamStore::new();
        let model = SearchModel::new(config.model.clone(), &mut store, config.seed);
        let optimizer = Sgd::new(&store, config.momentum, config.weight_decay);
        let mut oim_rng = derived_rng(config.seed, u64::MAX, 0);
        let dim = config.model.embedding_dim;
        let oim_student = OimState::new(
            &mut oim_rng,
            identity_index.len(),
            dim,
            config.oim.queue_size,
            config.oim.momentum,
            config.oim.temperature,
        );
        let oim_teacher = model.has_teacher().then(|| {
            OimState::new(
                &mut oim_rng,
                identity_index.len(),
                dim,
                config.oim.queue_size,
                config.oim.momentum,
                config.oim.temperature,
            )
        });
        Ok(Trainer {
            config,
            model,
            store,
            optimizer,
            oim_student,
            oim_teacher,
            identity_index,
            completed_epochs: 0,
            history: Vec::new(),
        })
    }

    pub fn from_checkpoint(body: CheckpointBody) -> Result<Trainer> {
        let config = body.config.clone();
        config.validate()?;
        let mut store = ParamStore::new();
        let model = SearchModel::new(config.model.clone(), &mut store, config.seed);
        store
            .load_entries(&body.params)
            .map_err(CoreError::Checkpoint)?;
        let mut optimizer = Sgd::new(&store, config.momentum, config.weight_decay);
        optimizer.load_buffers(body.optimizer).map_err(CoreError::Checkpoint)?;
        Ok(Trainer {
            config,
            model,
            store,
            optimizer,
            oim_student: body.oim_student,
            oim_teacher: body.oim_teacher,
            identity_index: IdentityIndex::from_ids(body.identity_ids),
            completed_epochs: body.epoch,
            history: body.metrics_history,
        })
    }

    pub fn checkpoint_body(&self) -> CheckpointBody {
        CheckpointBody {
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            epoch: self.completed_epochs,
            params: self.store.to_entries(),
            optimizer: self.optimizer.buffers().to_vec(),
            oim_student: self.oim_student.clone(),
            oim_teacher: self.oim_teacher.clone(),
            identity_ids: self.identity_index.ids().to_vec(),
            metrics_history: self.history.clone(),
        }
    }

    /// Train one epoch, logging every step.
    pub fn train_epoch(&mut self, data: &TrainData, log: &mut MetricsLog) -> Result<EpochRecord> {
        let epoch = self.completed_epochs;
        let lr = lr_schedule(&self.config, epoch)?;
        let mut order: Vec<usize> = (0..data.train.num_images()).collect();
        {
            use rand::seq::SliceRandom;
            let mut shuffle_rng = derived_rng(self.config.seed, epoch as u64, u64::MAX - 1);
            order.shuffle(&mut shuffle_rng);
        }
        let mut total = 0.0;
        let mut steps = 0usize;
        for (step, chunk) in order.chunks(self.config.batch_size).enumerate() {
            let batch: Vec<TrainImage> = chunk
                .iter()
                .map(|&i| {
                    let rec = &data.train.records()[i];
                    Ok(TrainImage {
                        image_id: rec.image_id.clone(),
                        pixels: data.pixels(&rec.file)?,
                        gts: rec.boxes.iter().map(GtBox::from_annotation).collect(),
                    })
                })
                .collect::<Result<_>>()?;
            let mut rng = derived_rng(self.config.seed, epoch as u64, step as u64);
            let outcome = train_step(
                &self.model,
                &mut self.store,
                &mut self.optimizer,
                &mut self.oim_student,
                self.oim_teacher.as_mut(),
                &self.identity_index,
                &self.config,
                &batch,
                lr,
                &mut rng,
            )?;
            total += outcome.report.total;
            steps += 1;
            log.log_step(epoch, step, lr, outcome.report)?;
        }
        self.completed_epochs += 1;
        let record = EpochRecord {
            epoch,
            mean_total_loss: if steps > 0 { total / steps as f64 } else { 0.0 },
            steps,
            search: None,
        };
        self.history.push(record.clone());
        Ok(record)
    }

    /// Build the protocol from the config and evaluate the current model.
    pub fn evaluate(&self, data: &TrainData, stratify: bool) -> Result<MetricReport> {
        let (protocol, _skips) = build_search_protocol(
            &data.test,
            self.config.eval.gallery_size,
            self.config.eval.positives,
            self.config.eval.protocol_seed,
        )?;
        evaluate_model(&self.model, &self.store, data, &protocol, stratify)
    }
}

/// Inference over the test split, then detection metrics over every test
/// image and search metrics over the protocol.
pub fn evaluate_model(
    model: &SearchModel,
    store: &ParamStore,
    data: &TrainData,
    protocol: &SearchProtocol,
    stratify: bool,
) -> Result<MetricReport> {
    let mut per_image: BTreeMap<String, Vec<Detection>> = BTreeMap::new();
    let mut det_eval = Vec::new();
    for rec in data.test.records() {
        let pixels = data.pixels(&rec.file)?;
        let dets = model.inference(store, &[pixels])?.remove(0);
        let converted: Vec<Detection> = dets
            .into_iter()
            .map(|d| Detection {
                image_id: rec.image_id.clone(),
                bbox: d.bbox,
                score: d.score,
                embedding: d.embedding,
            })
            .collect();
        det_eval.push((converted.clone(), rec.boxes.clone()));
        per_image.insert(rec.image_id.clone(), converted);
    }
    let detection = detection_recall_ap(&det_eval, IOU_THRESHOLD);

    let mut query_embedding = |entry: &crate::data::ProtocolEntry| -> Result<Array1<f64>> {
        let rec = data.test.record(&entry.query_image).ok_or_else(|| {
            CoreError::InvalidArgument(format!("query image '{}' missing", entry.query_image))
        })?;
        let pixels = data.pixels(&rec.file)?;
        let b = &entry.query_box;
        let emb = model.embed_boxes(store, &pixels, &[[b.x, b.y, b.x2(), b.y2()]])?;
        Ok(emb.row(0).to_owned())
    };

    let search = search_map_cmc(protocol, &per_image, &data.test, &mut query_embedding)?;
    let stratified = if stratify {
        Some(evaluate_stratified(protocol, &per_image, &data.test, &mut query_embedding)?)
    } else {
        None
    };
    Ok(MetricReport { detection, search, stratified })
}

pub struct RunOutcome {
    pub final_metrics: MetricReport,
    pub checkpoints: Vec<PathBuf>,
    pub log: MetricsLog,
    pub trainer: Trainer,
}

/// Run (or resume) a full training: epoch loop, per-epoch checkpoints, and
/// the automatic final evaluation.
pub fn run_training(
    config: TrainConfig,
    output_dir: Option<&Path>,
    resume_from: Option<&Path>,
) -> Result<RunOutcome> {
    let (mut trainer, data) = match resume_from {
        Some(path) => {
            let body = load_checkpoint(path)?;
            let trainer = Trainer::from_checkpoint(body)?;
            let data = TrainData::load(&trainer.config.dataset)?;
            (trainer, data)
        }
        None => {
            config.validate()?;
            let data = TrainData::load(&config.dataset)?;
            (Trainer::new(config, &data)?, data)
        }
    };
    if let Some(dir) = output_dir {
        std::fs::create_dir_all(dir)
            .map_err(|source| CoreError::Io { path: dir.to_path_buf(), source })?;
    }
    let mut log = match output_dir {
        Some(dir) => MetricsLog::at_path(&dir.join("metrics.jsonl")),
        None => MetricsLog::in_memory(),
    };
    let mut checkpoints = Vec::new();
    while trainer.completed_epochs < trainer.config.total_epochs {
        let mut record = trainer.train_epoch(&data, &mut log)?;
        let is_last = trainer.completed_epochs == trainer.config.total_epochs;
        if is_last {
            let metrics = trainer.evaluate(&data, false)?;
            record.search = Some(metrics.search);
            if let Some(last) = trainer.history.last_mut() {
                last.search = Some(metrics.search);
            }
        }
        log.log_epoch(record)?;
        if let Some(dir) = output_dir {
            let path = dir.join(format!("checkpoint_epoch_{:03}.ckpt", trainer.completed_epochs));
            save_checkpoint(&trainer.checkpoint_body(), &path)?;
            checkpoints.push(path);
        }
    }
    let final_metrics = trainer.evaluate(&data, true)?;
    Ok(RunOutcome { final_metrics, checkpoints, log, trainer })
}
