use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::Failure;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileRecord {
    pub path: String,
    pub sha256: String,
}

/// One line of `<out>/manifest.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub exit_code: i32,
    pub error: Option<String>,
    pub seed: Option<u64>,
    pub config: serde_json::Value,
    pub inputs: Vec<FileRecord>,
    /// Paths relative to the output directory.
    pub outputs: Vec<FileRecord>,
    /// Content hashes of the models read or written.
    pub checkpoints: BTreeMap<String, String>,
    pub wallclock_s: f64,
    pub versions: BTreeMap<String, String>,
}

impl RunManifest {
    /// Reads every line of a manifest file.
    pub fn read_all(path: &Path) -> Result<Vec<RunManifest>, Failure> {
        std::fs::read_to_string(path)?
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(Failure::from))
            .collect()
    }
}

pub fn hash_file(path: &Path) -> std::io::Result<String> {
    Ok(hex::encode(Sha256::digest(std::fs::read(path)?)))
}

/// Bookkeeping gathered while a command runs.
pub(crate) struct Recorder {
    pub out: PathBuf,
    pub command: &'static str,
    pub seed: Option<u64>,
    pub config: serde_json::Value,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub checkpoints: BTreeMap<String, String>,
}

impl Recorder {
    pub fn new(out: &Path, command: &'static str) -> Self {
        Recorder {
            out: out.to_path_buf(),
            command,
            seed: None,
            config: serde_json::Value::Null,
            inputs: Vec::new(),
            outputs: Vec::new(),
            checkpoints: BTreeMap::new(),
        }
    }

    pub fn input(&mut self, path: &Path) {
        self.inputs.push(path.to_path_buf());
    }

    pub fn output(&mut self, path: PathBuf) {
        if !self.outputs.contains(&path) {
            self.outputs.push(path);
        }
    }

    /// Registers every regular file in the output directory whose name starts with `prefix`.
    pub fn outputs_with_prefix(&mut self, prefix: &str) -> std::io::Result<()> {
        let mut found: Vec<PathBuf> = std::fs::read_dir(&self.out)?
            .filter_map(|e| e.ok())
            .filter(|e| e.file_type().map(|t| t.is_file()).unwrap_or(false))
            .filter(|e| e.file_name().to_string_lossy().starts_with(prefix))
            .filter(|e| !e.file_name().to_string_lossy().ends_with(".partial"))
            .map(|e| e.path())
            .collect();
        found.sort();
        found.into_iter().for_each(|p| self.output(p));
        Ok(())
    }

    fn records(paths: &[PathBuf], base: Option<&Path>) -> Vec<FileRecord> {
        let mut recs: Vec<FileRecord> = paths
            .iter()
            .filter(|p| p.is_file())
            .map(|p| FileRecord {
                path: base
                    .and_then(|b| p.strip_prefix(b).ok())
                    .unwrap_or(p)
                    .to_string_lossy()
                    .into_owned(),
                sha256: hash_file(p).unwrap_or_default(),
            })
            .collect();
        recs.sort_by(|a, b| a.path.cmp(&b.path));
        recs
    }

    pub fn finish(self, argv: &[String], result: &Result<(), Failure>, wallclock_s: f64) -> Result<(), Failure> {
        let mut versions = BTreeMap::new();
        versions.insert("pfcm".to_string(), env!("CARGO_PKG_VERSION").to_string());
        versions.insert(
            "checkpoint_format".to_string(),
            pfcm_core::field::checkpoint::VERSION.to_string(),
        );
        let manifest = RunManifest {
            command: self.command.to_string(),
            argv: argv.to_vec(),
            exit_code: result.as_ref().map(|_| crate::EXIT_OK).unwrap_or_else(|f| f.code),
            error: result.as_ref().err().map(|f| f.message.clone()),
            seed: self.seed,
            config: self.config,
            inputs: Self::records(&self.inputs, None),
            outputs: Self::records(&self.outputs, Some(&self.out)),
            checkpoints: self.checkpoints,
            wallclock_s,
            versions,
        };
        std::fs::create_dir_all(&self.out)?;
        let mut line = serde_json::to_string(&manifest)?;
        line.push('\n');
        OpenOptions::new()
            .create(true)
            .append(true)
            .open(self.out.join("manifest.jsonl"))?
            .write_all(line.as_bytes())?;
        Ok(())
    }
}
