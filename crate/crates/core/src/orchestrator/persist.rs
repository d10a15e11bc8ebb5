//! Experiment directory layout:
//!
//! ```text
//! config.json            experiment config
//! manifest.json          sample ids, roles, labeled flags, pending queue
//! samples/NNN_*.vvol     image, gt, machine/corrected centerline, annotation mask
//! submissions/NNN_*.vvol human annotations awaiting the next round
//! rounds/NNN.json        round records (reproducible)
//! rounds/NNN.timing.json wall-clock per round
//! checkpoints/NNN.bin    segmenter; NNN.critic.bin critic
//! log.json               final log with test metrics
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{
    Annotation, Annotator, ExperimentConfig, ExperimentLog, ExperimentState, Provenance, Role, RoundRecord, Sample,
};
use crate::model::{
    decode_critic, decode_segmenter, encode_critic, encode_segmenter, extract_features, CheckpointError,
};
use crate::query::{QueryScore, SampleId};
use crate::volume::{read_mask, read_volume, write_volume, AnyVolume, BinaryMask, VolumeError};

#[derive(Debug, Error)]
pub enum PersistError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("{path}: {source}")]
    Volume { path: PathBuf, source: VolumeError },
    #[error("{path}: {source}")]
    Checkpoint { path: PathBuf, source: CheckpointError },
    #[error("inconsistent experiment directory: {0}")]
    Inconsistent(String),
}

type Result<T> = std::result::Result<T, PersistError>;

pub fn checkpoint_name(round: usize) -> String {
    format!("checkpoints/{round:03}.bin")
}

fn critic_name(round: usize) -> String {
    format!("checkpoints/{round:03}.critic.bin")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestSample {
    pub id: SampleId,
    pub role: Role,
    pub provenance: Provenance,
    pub labeled: bool,
    pub annotator: Option<Annotator>,
    pub machine_corrupted: bool,
    pub true_branch_count: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    /// Completed rounds (round 0 is the initial training).
    pub rounds_completed: usize,
    pub samples: Vec<ManifestSample>,
    pub pending: Vec<SampleId>,
    pub pending_scores: Vec<QueryScore>,
    pub submitted: Vec<SubmittedEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubmittedEntry {
    pub id: SampleId,
    pub annotator: Annotator,
}

impl Manifest {
    pub fn of(state: &ExperimentState) -> Self {
        Self {
            rounds_completed: state.records.len(),
            samples: state
                .samples
                .iter()
                .map(|s| ManifestSample {
                    id: s.id,
                    role: s.role(),
                    provenance: s.provenance,
                    labeled: s.labeled,
                    annotator: s.annotator.clone(),
                    machine_corrupted: s.machine_corrupted,
                    true_branch_count: s.true_branch_count,
                })
                .collect(),
            pending: state.pending.clone(),
            pending_scores: state.pending_scores.clone(),
            submitted: state
                .submitted
                .values()
                .map(|a| SubmittedEntry {
                    id: a.sample_id,
                    annotator: a.annotator.clone(),
                })
                .collect(),
        }
    }
}

/// Handle on an experiment directory.
#[derive(Debug, Clone)]
pub struct ExperimentDir {
    root: PathBuf,
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> PersistError + '_ {
    move |source| PersistError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    // Write-then-rename so readers never observe a torn file.
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|source| PersistError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    bytes.push(b'\n');
    write_bytes(path, &bytes)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    serde_json::from_slice(&bytes).map_err(|source| PersistError::Json {
        path: path.to_path_buf(),
        source,
    })
}

fn write_vol(path: &Path, vol: AnyVolume) -> Result<()> {
    write_volume(&vol, path).map_err(|source| PersistError::Volume {
        path: path.to_path_buf(),
        source,
    })
}

fn read_mask_at(path: &Path) -> Result<BinaryMask> {
    read_mask(path).map_err(|source| PersistError::Volume {
        path: path.to_path_buf(),
        source,
    })
}

fn optional_mask(path: &Path) -> Result<Option<BinaryMask>> {
    if path.exists() {
        read_mask_at(path).map(Some)
    } else {
        Ok(None)
    }
}

impl ExperimentDir {
    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn sample_file(&self, id: SampleId, what: &str) -> PathBuf {
        self.root.join(format!("samples/{id:03}_{what}.vvol"))
    }

    fn submission_file(&self, id: SampleId, what: &str) -> PathBuf {
        self.root.join(format!("submissions/{id:03}_{what}.vvol"))
    }

    pub fn create(root: &Path, state: &ExperimentState) -> Result<Self> {
        let dir = Self {
            root: root.to_path_buf(),
        };
        if dir.path("config.json").exists() {
            return Err(PersistError::Inconsistent(format!(
                "{} already holds an experiment",
                root.display()
            )));
        }
        for sub in ["samples", "submissions", "rounds", "checkpoints"] {
            let p = dir.path(sub);
            fs::create_dir_all(&p).map_err(io_err(&p))?;
        }
        write_json(&dir.path("config.json"), &state.config)?;
        for s in &state.samples {
            write_vol(&dir.sample_file(s.id, "image"), s.image.clone().into())?;
            if let Some(m) = &s.gt_mask {
                write_vol(&dir.sample_file(s.id, "gt"), m.clone().into())?;
            }
            if let Some(m) = &s.machine_centerline {
                write_vol(&dir.sample_file(s.id, "machine_cl"), m.clone().into())?;
            }
        }
        dir.write_labels(state)?;
        dir.write_manifest(state)?;
        Ok(dir)
    }

    fn write_labels(&self, state: &ExperimentState) -> Result<()> {
        for s in state.samples.iter().filter(|s| s.labeled) {
            let ann = self.sample_file(s.id, "annotation");
            if ann.exists() {
                continue;
            }
            if let Some(m) = &s.corrected_centerline {
                write_vol(&self.sample_file(s.id, "corrected_cl"), m.clone().into())?;
            }
            if let Some(m) = &s.annotation_mask {
                write_vol(&ann, m.clone().into())?;
            }
        }
        Ok(())
    }

    pub fn write_manifest(&self, state: &ExperimentState) -> Result<()> {
        write_json(&self.path("manifest.json"), &Manifest::of(state))
    }

    pub fn write_round(&self, state: &ExperimentState, record: &RoundRecord) -> Result<()> {
        let r = record.round;
        let seed = state.config.seed;
        let meta = serde_json::json!({ "round": r });
        write_bytes(
            &self.path(&checkpoint_name(r)),
            &encode_segmenter(&state.segmenter, seed, meta.clone()),
        )?;
        write_bytes(&self.path(&critic_name(r)), &encode_critic(&state.critic, seed, meta))?;
        write_json(&self.path(&format!("rounds/{r:03}.json")), record)?;
        write_json(
            &self.path(&format!("rounds/{r:03}.timing.json")),
            &serde_json::json!({ "round": r, "wall_clock_seconds": record.wall_clock_seconds }),
        )?;
        self.write_labels(state)?;
        // Submissions were folded into the samples.
        for s in state.samples.iter().filter(|s| s.labeled) {
            for what in ["mask", "centerline"] {
                let p = self.submission_file(s.id, what);
                if p.exists() {
                    fs::remove_file(&p).map_err(io_err(&p))?;
                }
            }
        }
        self.write_manifest(state)
    }

    pub fn write_submission(&self, ann: &Annotation) -> Result<()> {
        write_vol(&self.submission_file(ann.sample_id, "mask"), ann.mask.clone().into())?;
        write_vol(
            &self.submission_file(ann.sample_id, "centerline"),
            ann.centerline.clone().into(),
        )
    }

    pub fn write_log(&self, log: &ExperimentLog) -> Result<()> {
        write_json(&self.path("log.json"), log)
    }

    pub fn read_records(&self) -> Result<Vec<RoundRecord>> {
        let manifest: Manifest = read_json(&self.path("manifest.json"))?;
        (0..manifest.rounds_completed)
            .map(|r| {
                let mut rec: RoundRecord = read_json(&self.path(&format!("rounds/{r:03}.json")))?;
                let timing = self.path(&format!("rounds/{r:03}.timing.json"));
                if let Ok(t) = read_json::<serde_json::Value>(&timing) {
                    rec.wall_clock_seconds = t["wall_clock_seconds"].as_f64().unwrap_or(0.0);
                }
                Ok(rec)
            })
            .collect()
    }

    /// Reconstructs the experiment state from disk.
    pub fn open(root: &Path) -> Result<(ExperimentState, Self)> {
        let dir = Self {
            root: root.to_path_buf(),
        };
        let config: ExperimentConfig = read_json(&dir.path("config.json"))?;
        let manifest: Manifest = read_json(&dir.path("manifest.json"))?;
        let mut samples = Vec::with_capacity(manifest.samples.len());
        for (i, m) in manifest.samples.iter().enumerate() {
            if m.id as usize != i {
                return Err(PersistError::Inconsistent(format!("sample ids out of order at {i}")));
            }
            let image_path = dir.sample_file(m.id, "image");
            let image = read_volume(&image_path)
                .map_err(|source| PersistError::Volume {
                    path: image_path.clone(),
                    source,
                })?
                .into_image()
                .ok_or_else(|| PersistError::Inconsistent(format!("{} is not an image", image_path.display())))?;
            samples.push(Sample {
                id: m.id,
                image,
                gt_mask: optional_mask(&dir.sample_file(m.id, "gt"))?,
                machine_centerline: optional_mask(&dir.sample_file(m.id, "machine_cl"))?,
                machine_corrupted: m.machine_corrupted,
                corrected_centerline: optional_mask(&dir.sample_file(m.id, "corrected_cl"))?,
                annotation_mask: optional_mask(&dir.sample_file(m.id, "annotation"))?,
                annotator: m.annotator.clone(),
                labeled: m.labeled,
                provenance: m.provenance,
                true_branch_count: m.true_branch_count,
            });
        }
        let mut submitted = BTreeMap::new();
        for e in &manifest.submitted {
            submitted.insert(
                e.id,
                Annotation {
                    sample_id: e.id,
                    mask: read_mask_at(&dir.submission_file(e.id, "mask"))?,
                    centerline: read_mask_at(&dir.submission_file(e.id, "centerline"))?,
                    annotator: e.annotator.clone(),
                },
            );
        }
        let records = dir.read_records()?;
        let last = records
            .len()
            .checked_sub(1)
            .ok_or_else(|| PersistError::Inconsistent("no completed rounds".into()))?;
        let ckpt = |name: String| -> Result<Vec<u8>> {
            let p = dir.path(&name);
            fs::read(&p).map_err(io_err(&p))
        };
        let checkpoint_err = |name: String| {
            move |source| PersistError::Checkpoint {
                path: PathBuf::from(name),
                source,
            }
        };
        let (segmenter, _) =
            decode_segmenter(&ckpt(checkpoint_name(last))?).map_err(checkpoint_err(checkpoint_name(last)))?;
        let (critic, _) = decode_critic(&ckpt(critic_name(last))?).map_err(checkpoint_err(critic_name(last)))?;
        let features = samples
            .iter()
            .map(|s| extract_features(&s.image).map_err(|e| PersistError::Inconsistent(e.to_string())))
            .collect::<Result<Vec<_>>>()?;
        let state = ExperimentState {
            config,
            samples,
            segmenter,
            critic,
            records,
            pending: manifest.pending,
            pending_scores: manifest.pending_scores,
            submitted,
            features,
        };
        Ok((state, dir))
    }
}
