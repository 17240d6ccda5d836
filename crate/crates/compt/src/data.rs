//! Task datasets as JSON lines plus a manifest.
//!
//! A dataset directory holds `manifest.json` and, per task,
//! `<task>/{train,dev,test}.jsonl` with one `{"tokens":[..],"label":id}` per line.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use compt_core::tasks::generate_task_family;
use compt_core::{Example, FamilySpec, Split, TaskData, TaskSpec, World};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::files::{read_json, write_json};

pub const MANIFEST: &str = "manifest.json";
pub const DATASET_FORMAT_VERSION: u32 = 1;

/// The parameters a [`World`] is rebuilt from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub vocab: usize,
    pub num_labels: usize,
    pub seq_len: usize,
    pub latent_dim: usize,
    pub margin: f64,
    pub seed: u64,
}

impl WorldConfig {
    pub fn build(&self) -> Result<World> {
        Ok(World::new(self.vocab, self.num_labels, self.seq_len, self.latent_dim, self.seed)?.with_margin(self.margin))
    }
}

/// Split files of one task, relative to the dataset directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitFiles {
    pub train: String,
    pub dev: String,
    pub test: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub seed: u64,
    pub world: WorldConfig,
    pub family: FamilySpec,
    pub tasks: Vec<TaskSpec>,
    pub files: BTreeMap<String, SplitFiles>,
}

/// A loaded dataset directory.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: Manifest,
    pub world: World,
    pub tasks: Vec<TaskData>,
}

impl Dataset {
    /// Generates the family in memory.
    pub fn generate(world: WorldConfig, family: FamilySpec, seed: u64) -> Result<Self> {
        let built = world.build()?;
        let tasks = generate_task_family(&built, &family, seed)?;
        let files = tasks
            .iter()
            .map(|t| {
                let id = &t.spec.task_id;
                let f = |s: &str| format!("{id}/{s}.jsonl");
                (id.clone(), SplitFiles { train: f("train"), dev: f("dev"), test: f("test") })
            })
            .collect();
        Ok(Self {
            manifest: Manifest {
                format_version: DATASET_FORMAT_VERSION,
                seed,
                world,
                family,
                tasks: tasks.iter().map(|t| t.spec.clone()).collect(),
                files,
            },
            world: built,
            tasks,
        })
    }

    /// Rules of every task, for keeping pretraining away from them.
    pub fn rules(&self) -> Vec<Vec<f64>> {
        self.tasks.iter().map(|t| t.spec.rule.clone()).collect()
    }

    pub fn task(&self, id: &str) -> Result<&TaskData> {
        self.tasks
            .iter()
            .find(|t| t.spec.task_id == id)
            .ok_or_else(|| compt_core::Error::UnknownTask(id.into()).into())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        for task in &self.tasks {
            let files = &self.manifest.files[&task.spec.task_id];
            for (split, name) in [(Split::Train, &files.train), (Split::Dev, &files.dev), (Split::Test, &files.test)] {
                write_jsonl(&dir.join(name), task.split(split))?;
            }
        }
        write_json(&dir.join(MANIFEST), &self.manifest)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let manifest: Manifest = read_json(&path)?;
        if manifest.format_version != DATASET_FORMAT_VERSION {
            return Err(Error::parse(&path, format!("unsupported dataset version {}", manifest.format_version)));
        }
        let world = manifest.world.build()?;
        let mut tasks = Vec::with_capacity(manifest.tasks.len());
        for spec in &manifest.tasks {
            spec.validate(&world)?;
            let files = manifest
                .files
                .get(&spec.task_id)
                .ok_or_else(|| Error::parse(&path, format!("no files listed for task `{}`", spec.task_id)))?;
            tasks.push(TaskData {
                spec: spec.clone(),
                train: read_jsonl(&dir.join(&files.train))?,
                dev: read_jsonl(&dir.join(&files.dev))?,
                test: read_jsonl(&dir.join(&files.test))?,
            });
        }
        Ok(Self { manifest, world, tasks })
    }
}

pub fn write_jsonl(path: &Path, examples: &[Example]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for e in examples {
        serde_json::to_writer(&mut out, e).map_err(|e| Error::parse(path, e))?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn read_jsonl(path: &Path) -> Result<Vec<Example>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::parse(path, format!("line {}: {e}", i + 1)))?);
    }
    Ok(out)
}
