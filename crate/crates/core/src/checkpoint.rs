//! Self-describing checkpoints.
//!
//! A checkpoint is a directory with two files:
//!
//! * `manifest.json`: format version, the full [`TrainConfig`], data
//!   transform, loop state (iteration, RNG states, shuffle order, test window)
//!   and a section table for the parameter blob.
//! * `params.bin`: one `ARDM` container (version 2, a single row of
//!   little-endian f64) holding every model block followed by the optimizer
//!   buffers `opt.ms` and `opt.mom`. Section offsets and lengths count values,
//!   not bytes.
//!
//! Parameters are stored at full precision, so a resumed run continues
//! bitwise-identically.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::{OptimizerKind, TrainConfig};
use crate::data::{read_container, write_container, Transform, VERSION_F64};
use crate::error::{ArdError, Result};
use crate::models::ModelState;
use crate::numerics::{Matrix, RngStream};
use crate::optim::{RmsPropState, TrainLoopState, Trainer};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const PARAMS_FILE: &str = "params.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Section {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerMeta {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub decay: f64,
    pub momentum: f64,
    pub epsilon: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub config: TrainConfig,
    pub input_dim: usize,
    /// Training-set size, which fixes the per-epoch relevance KL weight.
    pub train_rows: usize,
    pub iteration: u64,
    pub transform: Transform,
    pub optimizer: OptimizerMeta,
    pub loop_state: TrainLoopState,
    pub sections: Vec<Section>,
}

/// Everything needed to rebuild a [`Trainer`] without the original config file.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub model: ModelState,
    pub optimizer: RmsPropState,
}

impl Checkpoint {
    pub fn capture(trainer: &Trainer, transform: &Transform) -> Self {
        let opt = trainer.optimizer().clone();
        let model = trainer.model().clone();
        let loop_state = trainer.loop_state();
        let mut sections = Vec::new();
        let mut offset = 0;
        let names = model
            .blocks()
            .into_iter()
            .map(|(n, b)| (n, b.len()))
            .chain([("opt.ms".to_string(), opt.len()), ("opt.mom".to_string(), opt.len())]);
        for (name, len) in names {
            sections.push(Section { name, offset, len });
            offset += len;
        }
        Self {
            manifest: Manifest {
                format_version: FORMAT_VERSION,
                config: trainer.config().clone(),
                input_dim: model.data_dim(),
                train_rows: trainer.train_set().len(),
                iteration: loop_state.iteration,
                transform: transform.clone(),
                optimizer: OptimizerMeta {
                    kind: opt.kind,
                    learning_rate: opt.learning_rate,
                    decay: opt.decay,
                    momentum: opt.momentum,
                    epsilon: opt.epsilon,
                },
                loop_state,
                sections,
            },
            model,
            optimizer: opt,
        }
    }

    /// Writes into `dir` via a sibling temporary directory and a rename, so a
    /// crash never leaves a half-written checkpoint behind.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let tmp = sibling(dir, "tmp");
        if tmp.exists() {
            fs::remove_dir_all(&tmp).map_err(|e| ArdError::io(&tmp, e))?;
        }
        fs::create_dir_all(&tmp).map_err(|e| ArdError::io(&tmp, e))?;
        let manifest = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        let mpath = tmp.join(MANIFEST_FILE);
        fs::write(&mpath, manifest).map_err(|e| ArdError::io(&mpath, e))?;

        let mut blob = self.model.to_flat();
        blob.extend_from_slice(&self.optimizer.ms);
        blob.extend_from_slice(&self.optimizer.mom);
        let len = blob.len();
        write_container(&tmp.join(PARAMS_FILE), &Matrix::new(1, len, blob)?, VERSION_F64)?;

        if dir.exists() {
            let old = sibling(dir, "old");
            if old.exists() {
                fs::remove_dir_all(&old).map_err(|e| ArdError::io(&old, e))?;
            }
            fs::rename(dir, &old).map_err(|e| ArdError::io(dir, e))?;
            fs::rename(&tmp, dir).map_err(|e| ArdError::io(dir, e))?;
            fs::remove_dir_all(&old).map_err(|e| ArdError::io(&old, e))?;
        } else {
            fs::rename(&tmp, dir).map_err(|e| ArdError::io(dir, e))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mpath = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&mpath).map_err(|e| ArdError::io(&mpath, e))?;
        let head: serde_json::Value = serde_json::from_str(&text).map_err(|e| manifest_err(&mpath, &e))?;
        let found = head.get("format_version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
        if found != FORMAT_VERSION {
            return Err(ArdError::Version {
                found,
                expected: FORMAT_VERSION,
            });
        }
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| manifest_err(&mpath, &e))?;
        manifest.config.validate()?;

        let ppath = dir.join(PARAMS_FILE);
        let (version, blob) = read_container(&ppath)?;
        if version != VERSION_F64 {
            return Err(ArdError::Version {
                found: version,
                expected: VERSION_F64,
            });
        }
        let blob = blob.into_vec();

        // The section table must describe exactly the blocks this model has.
        let mut model = ModelState::init(&manifest.config.model_spec(manifest.input_dim), &mut RngStream::new(0))?;
        let expected: Vec<(String, usize)> = model
            .blocks()
            .into_iter()
            .map(|(n, b)| (n, b.len()))
            .chain([
                ("opt.ms".to_string(), model.num_params()),
                ("opt.mom".to_string(), model.num_params()),
            ])
            .collect();
        if expected.len() != manifest.sections.len() {
            return Err(format_err(&mpath, "sections", "section count does not match the model"));
        }
        let mut end = 0;
        for ((name, len), s) in expected.iter().zip(&manifest.sections) {
            if &s.name != name || s.len != *len || s.offset != end {
                return Err(format_err(
                    &mpath,
                    "sections",
                    &format!("expected section {name} at {end} with {len} values, found {} at {} with {}", s.name, s.offset, s.len),
                ));
            }
            end += len;
        }
        if end != blob.len() {
            return Err(format_err(
                &ppath,
                "payload",
                &format!("blob has {} values, sections need {end}", blob.len()),
            ));
        }
        let n = model.num_params();
        model.set_flat(&blob[..n])?;
        model.validate()?;
        let meta = &manifest.optimizer;
        let optimizer = RmsPropState {
            kind: meta.kind,
            learning_rate: meta.learning_rate,
            decay: meta.decay,
            momentum: meta.momentum,
            epsilon: meta.epsilon,
            ms: blob[n..2 * n].to_vec(),
            mom: blob[2 * n..].to_vec(),
        };
        Ok(Self {
            manifest,
            model,
            optimizer,
        })
    }
}

fn sibling(dir: &Path, suffix: &str) -> PathBuf {
    let mut name = dir.file_name().map(|n| n.to_owned()).unwrap_or_default();
    name.push(format!(".{suffix}"));
    dir.with_file_name(name)
}

fn manifest_err(path: &Path, e: &serde_json::Error) -> ArdError {
    format_err(path, &format!("line {}, column {}", e.line(), e.column()), &e.to_string())
}

fn format_err(path: &Path, location: &str, message: &str) -> ArdError {
    ArdError::Format {
        path: path.to_path_buf(),
        location: location.to_string(),
        message: message.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Dataset;
    use crate::models::Variant;

    fn data(n: usize) -> Dataset {
        let mut rng = RngStream::new(3);
        let mut x = Matrix::zeros(n, 3);
        rng.fill_std_normal(x.as_mut_slice());
        Dataset::new("d", x).unwrap()
    }

    fn config(variant: Variant) -> TrainConfig {
        let mut c = TrainConfig::new(variant, 2, vec![5]);
        c.iterations = Some(100);
        c.batch_size = 16;
        c.learning_rate = 5e-3;
        c.eval_every = 7;
        c
    }

    #[test]
    fn resume_from_disk_is_bitwise_identical() {
        for variant in Variant::ALL {
            let dir = tempfile::tempdir().unwrap();
            let (train, test) = (data(60), Some(data(9)));
            let c = config(variant);
            let mut full = Trainer::new(c.clone(), train.clone(), test.clone()).unwrap();
            let mut full_rows = Vec::new();
            full.run(|_, r| {
                full_rows.push(r.clone());
                Ok(())
            })
            .unwrap();

            let mut half = Trainer::new(c, train.clone(), test.clone()).unwrap();
            for _ in 0..50 {
                half.step().unwrap();
            }
            let ck_dir = dir.path().join("ck");
            Checkpoint::capture(&half, &Transform::identity(3)).save(&ck_dir).unwrap();
            // saving twice replaces cleanly
            Checkpoint::capture(&half, &Transform::identity(3)).save(&ck_dir).unwrap();
            let ck = Checkpoint::load(&ck_dir).unwrap();
            assert_eq!(ck.model, *half.model());
            let mut resumed = Trainer::resume(
                ck.manifest.config,
                train,
                test,
                ck.model,
                ck.optimizer,
                ck.manifest.loop_state,
            )
            .unwrap();
            let mut rows = Vec::new();
            resumed
                .run(|_, r| {
                    rows.push(r.clone());
                    Ok(())
                })
                .unwrap();
            assert_eq!(resumed.model(), full.model());
            assert_eq!(resumed.optimizer(), full.optimizer());
            assert!(rows.iter().zip(&full_rows[50..]).all(|(a, b)| a.same_trajectory(b)));
        }
    }

    #[test]
    fn version_and_section_mismatches_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        let ck_dir = dir.path().join("ck");
        let t = Trainer::new(config(Variant::SgvbArd), data(20), None).unwrap();
        Checkpoint::capture(&t, &Transform::identity(3)).save(&ck_dir).unwrap();

        let mpath = ck_dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&mpath).unwrap();
        fs::write(&mpath, text.replacen("\"format_version\": 1", "\"format_version\": 9", 1)).unwrap();
        let err = Checkpoint::load(&ck_dir).unwrap_err();
        assert!(matches!(err, ArdError::Version { found: 9, expected: 1 }), "{err}");

        fs::write(&mpath, text.replacen("ard.log_lambda", "ard.log_lambdaX", 1)).unwrap();
        assert!(Checkpoint::load(&ck_dir).unwrap_err().to_string().contains("ard.log_lambda"));

        fs::write(&mpath, &text).unwrap();
        let mut bytes = fs::read(ck_dir.join(PARAMS_FILE)).unwrap();
        bytes.truncate(bytes.len() - 8);
        fs::write(ck_dir.join(PARAMS_FILE), bytes).unwrap();
        assert!(Checkpoint::load(&ck_dir).is_err());
    }

    #[test]
    fn manifest_is_readable_json_with_config() {
        let dir = tempfile::tempdir().unwrap();
        let ck_dir = dir.path().join("ck");
        let t = Trainer::new(config(Variant::Sgvb), data(20), None).unwrap();
        Checkpoint::capture(&t, &Transform::identity(3)).save(&ck_dir).unwrap();
        let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(ck_dir.join(MANIFEST_FILE)).unwrap()).unwrap();
        assert_eq!(v["config"]["variant"], "sgvb");
        assert_eq!(v["sections"][0]["name"], "encoder.hidden0.weight");
        assert_eq!(v["sections"][0]["offset"], 0);
    }
}
