//! Epoch loop, JSONL logging and resumable checkpoints.
//!
//! A training checkpoint is one safetensors archive holding the student
//! (`student/…`), the teacher (`teacher/…`) and the AdamW moments
//! (`adam_m/…`, `adam_v/…`). Counters and the run configuration travel in the
//! archive metadata. Every random draw is derived from `(seed, epoch)` or
//! `(seed, iter)`, so resuming at an epoch boundary replays the uninterrupted
//! run exactly.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::Path;

use crate::adaptation::apply_freeze_policy;
use crate::augment::AugmentationConfig;
use crate::backbone::Segmenter;
use crate::data::{batches_per_epoch, sample_epoch, TrainData};
use crate::error::{Error, Result};
use crate::params::ParamStore;

use super::engine::{prepare_input, train_step, StepStats, TrainState};
use super::{AdamW, S2MatchConfig, TeacherState};

pub const FORMAT: &str = "waterseg-train-1";

/// Which weights to take out of a training checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum WeightSet {
    #[default]
    Teacher,
    Student,
}

impl WeightSet {
    fn prefix(self) -> &'static str {
        match self {
            WeightSet::Teacher => "teacher/",
            WeightSet::Student => "student/",
        }
    }
}

pub struct Trainer<'a> {
    pub model: Segmenter,
    pub cfg: S2MatchConfig,
    pub aug: AugmentationConfig,
    pub data: &'a TrainData,
    pub state: TrainState,
    /// Completed epochs.
    pub epoch: u64,
}

impl<'a> Trainer<'a> {
    /// Fresh run: seeded initialization and the freeze policy from the
    /// adaptation config.
    pub fn new(model: Segmenter, cfg: S2MatchConfig, aug: AugmentationConfig, data: &'a TrainData, init_seed: u64) -> Result<Self> {
        cfg.validate()?;
        aug.validate()?;
        if aug.crop_size != model.backbone.input_size {
            return Err(Error::config(format!(
                "augment.crop_size {:?} must equal backbone.input_size {:?}",
                aug.crop_size, model.backbone.input_size
            )));
        }
        if data.labeled.is_empty() {
            return Err(Error::Dataset(vec!["no labeled images".into()]));
        }
        let mut student = model.init_params(init_seed);
        let policy = model.adaptation.freeze_policy()?;
        apply_freeze_policy(&mut student, &model.backbone, &policy);
        let state = TrainState::new(student, &cfg);
        Ok(Self {
            model,
            cfg,
            aug,
            data,
            state,
            epoch: 0,
        })
    }

    pub fn iters_per_epoch(&self) -> u64 {
        batches_per_epoch(self.data.labeled.len(), self.cfg.batch_labeled) as u64
    }

    pub fn total_iters(&self) -> u64 {
        self.iters_per_epoch() * self.cfg.epochs as u64
    }

    pub fn finished(&self) -> bool {
        self.epoch >= self.cfg.epochs as u64
    }

    /// Runs one epoch, writing one JSON line per iteration to `log`.
    pub fn run_epoch(&mut self, log: &mut dyn Write) -> Result<Vec<StepStats>> {
        let plans = sample_epoch(
            self.data.labeled.len(),
            self.data.unlabeled.len(),
            self.cfg.batch_labeled,
            self.cfg.batch_unlabeled,
            self.cfg.seed,
            self.epoch,
        )?;
        let total = self.total_iters();
        let mut stats = Vec::with_capacity(plans.len());
        for plan in plans {
            let batch = plan.materialize(self.data);
            let input = prepare_input(&batch, &self.aug)?;
            let s = train_step(&self.model, &mut self.state, &input, &self.cfg, total)?;
            let line = serde_json::to_string(&s)?;
            writeln!(log, "{line}").map_err(|e| Error::io("<training log>", e))?;
            stats.push(s);
        }
        log.flush().map_err(|e| Error::io("<training log>", e))?;
        self.epoch += 1;
        Ok(stats)
    }

    pub fn checkpoint_bytes(&self, mut metadata: HashMap<String, String>) -> Result<Vec<u8>> {
        let mut all = ParamStore::new();
        for (name, p) in self.state.student.iter() {
            all.insert(format!("student/{name}"), p.value.clone());
            all.get_mut(&format!("student/{name}")).expect("inserted").trainable = p.trainable;
        }
        for (name, p) in self.state.teacher.params.iter() {
            all.insert(format!("teacher/{name}"), p.value.clone());
        }
        for (name, m) in &self.state.opt.m {
            all.insert(format!("adam_m/{name}"), m.clone());
        }
        for (name, v) in &self.state.opt.v {
            all.insert(format!("adam_v/{name}"), v.clone());
        }
        metadata.insert("format".into(), FORMAT.into());
        metadata.insert("iter".into(), self.state.iter.to_string());
        metadata.insert("epoch".into(), self.epoch.to_string());
        metadata.insert("teacher_iter".into(), self.state.teacher.iter.to_string());
        metadata.insert("adam_t".into(), self.state.opt.t.to_string());
        all.to_bytes(metadata)
    }

    pub fn save_checkpoint(&self, path: &Path, metadata: HashMap<String, String>) -> Result<()> {
        let bytes = self.checkpoint_bytes(metadata)?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    /// Restores student, teacher, optimizer and counters from a checkpoint
    /// written by [`Trainer::save_checkpoint`].
    pub fn restore(&mut self, path: &Path) -> Result<()> {
        let (all, meta) = ParamStore::load(path)?;
        if meta.get("format").map(String::as_str) != Some(FORMAT) {
            return Err(Error::Checkpoint(format!("{} is not a training checkpoint", path.display())));
        }
        let num = |k: &str| -> Result<u64> {
            meta.get(k)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Checkpoint(format!("metadata `{k}` missing")))
        };
        let student = split_prefix(&all, "student/", true);
        student.check_congruent(&self.state.student).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let teacher = split_prefix(&all, "teacher/", false);
        let mut opt = AdamW::new(self.cfg.adam_betas[0], self.cfg.adam_betas[1], self.cfg.adam_eps, self.cfg.weight_decay);
        opt.t = num("adam_t")?;
        opt.m = moments(&all, "adam_m/");
        opt.v = moments(&all, "adam_v/");
        self.state = TrainState {
            student,
            teacher: TeacherState {
                params: teacher,
                iter: num("teacher_iter")?,
            },
            opt,
            iter: num("iter")?,
        };
        self.epoch = num("epoch")?;
        Ok(())
    }
}

fn split_prefix(all: &ParamStore, prefix: &str, keep_trainable: bool) -> ParamStore {
    let mut out = ParamStore::new();
    for (name, p) in all.iter() {
        if let Some(rest) = name.strip_prefix(prefix) {
            out.insert(rest.to_string(), p.value.clone());
            out.get_mut(rest).expect("inserted").trainable = keep_trainable && p.trainable;
        }
    }
    out
}

fn moments(all: &ParamStore, prefix: &str) -> BTreeMap<String, crate::autograd::Array> {
    all.iter()
        .filter_map(|(n, p)| n.strip_prefix(prefix).map(|r| (r.to_string(), p.value.clone())))
        .collect()
}

/// Model weights from either a training checkpoint (teacher or student) or a
/// plain parameter archive, plus the archive metadata.
pub fn load_weights(path: &Path, which: WeightSet) -> Result<(ParamStore, HashMap<String, String>)> {
    let (all, meta) = ParamStore::load(path)?;
    if meta.get("format").map(String::as_str) == Some(FORMAT) {
        Ok((split_prefix(&all, which.prefix(), false), meta))
    } else {
        Ok((all, meta))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adaptation::AdaptationConfig;
    use crate::backbone::BackboneConfig;
    use crate::data::{toy_scene, LabeledSample, ToyConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (Segmenter, S2MatchConfig, AugmentationConfig, TrainData) {
        let model = Segmenter::new(
            BackboneConfig {
                stage_depths: [1, 1, 1, 1],
                stage_channels: [4, 6, 8, 10],
                neck_channels: 4,
                attention_heads: 1,
                patch_stride: 2,
                input_size: [16, 16],
                decoder_hidden: 4,
                ..BackboneConfig::default()
            },
            AdaptationConfig {
                lora_rank: 2,
                adapter_hidden: 4,
                task_dim: 4,
                ..AdaptationConfig::default()
            },
        )
        .unwrap();
        let toy = ToyConfig {
            image_size: [16, 16],
            coverage_range: [0.0, 1.0],
            ..ToyConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let labeled = (0..3)
            .map(|_| {
                let (image, mask) = toy_scene(&toy, &mut rng);
                LabeledSample { image, mask }
            })
            .collect();
        let unlabeled = (0..4).map(|_| toy_scene(&toy, &mut rng).0).collect();
        let cfg = S2MatchConfig {
            epochs: 2,
            lr0: 1e-3,
            tau: 0.6,
            tau_s: 0.55,
            seed: 9,
            ..Default::default()
        };
        let aug = AugmentationConfig {
            crop_size: [16, 16],
            ..Default::default()
        };
        (model, cfg, aug, TrainData { labeled, unlabeled })
    }

    #[test]
    fn resume_replays_the_uninterrupted_run() {
        let (model, cfg, aug, data) = setup();
        let mut full = Trainer::new(model.clone(), cfg.clone(), aug.clone(), &data, 3).unwrap();
        let mut log_full = Vec::new();
        full.run_epoch(&mut log_full).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let ck = dir.path().join("e1.safetensors");
        full.save_checkpoint(&ck, HashMap::new()).unwrap();
        full.run_epoch(&mut log_full).unwrap();

        let mut resumed = Trainer::new(model, cfg, aug, &data, 3).unwrap();
        resumed.restore(&ck).unwrap();
        let mut log_resumed = Vec::new();
        resumed.run_epoch(&mut log_resumed).unwrap();
        let tail: Vec<&str> = std::str::from_utf8(&log_full).unwrap().lines().skip(2).collect();
        let got: Vec<&str> = std::str::from_utf8(&log_resumed).unwrap().lines().collect();
        assert_eq!(tail, got);
        assert_eq!(full.state, resumed.state);
        assert!(resumed.finished());
    }

    #[test]
    fn log_has_one_line_per_iteration() {
        let (model, cfg, aug, data) = setup();
        let mut t = Trainer::new(model, cfg, aug, &data, 3).unwrap();
        let mut log = Vec::new();
        while !t.finished() {
            t.run_epoch(&mut log).unwrap();
        }
        let lines = std::str::from_utf8(&log).unwrap().lines().count() as u64;
        assert_eq!(lines, t.total_iters());
        let first: serde_json::Value = serde_json::from_str(std::str::from_utf8(&log).unwrap().lines().next().unwrap()).unwrap();
        for k in ["iter", "L_l", "L_ws", "L_ss", "L", "gamma", "lr"] {
            assert!(first.get(k).is_some(), "missing {k}");
        }
    }

    #[test]
    fn weights_load_from_either_half() {
        let (model, cfg, aug, data) = setup();
        let mut t = Trainer::new(model, cfg, aug, &data, 3).unwrap();
        t.run_epoch(&mut Vec::new()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let ck = dir.path().join("c.safetensors");
        t.save_checkpoint(&ck, HashMap::new()).unwrap();
        let (teacher, _) = load_weights(&ck, WeightSet::Teacher).unwrap();
        let (student, _) = load_weights(&ck, WeightSet::Student).unwrap();
        assert_eq!(teacher, t.state.teacher.params);
        teacher.check_congruent(&student).unwrap();
    }
}
