//! Run directories: manifest, checkpoint layout, overwrite protection.
//!
//! ```text
//! <run>/manifest.txt          one per run
//! <run>/vocab.txt
//! <run>/train_log.tsv
//! <run>/checkpoints/step-00000200.gen   generator archive
//! <run>/checkpoints/step-00000200.disc  discriminator archive
//! <run>/checkpoints/latest              name of the newest step tag
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::config::TrainConfig;
use crate::error::{Error, Result};

pub const MANIFEST: &str = "manifest.txt";
pub const VOCAB: &str = "vocab.txt";
pub const TRAIN_LOG: &str = "train_log.tsv";
pub const CHECKPOINTS: &str = "checkpoints";
pub const LATEST: &str = "latest";

/// Everything needed to reproduce a run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub out: PathBuf,
    /// Corpus prefix (`<data>.<split>.<style>`) and number of styles.
    pub data: PathBuf,
    pub styles: usize,
    /// Input file path to SHA-256 of its contents.
    pub datasets: BTreeMap<String, String>,
    pub config: TrainConfig,
}

pub fn hash_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

impl RunManifest {
    pub fn new(
        command: &str,
        config: &TrainConfig,
        out: &Path,
        data: &Path,
        styles: usize,
        inputs: &[PathBuf],
    ) -> Result<Self> {
        let mut datasets = BTreeMap::new();
        for p in inputs {
            datasets.insert(p.display().to_string(), hash_file(p)?);
        }
        Ok(RunManifest {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed: config.seed,
            out: out.to_path_buf(),
            data: data.to_path_buf(),
            styles,
            datasets,
            config: config.clone(),
        })
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "command = {}", self.command);
        let _ = writeln!(s, "version = {}", self.version);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "out = {}", self.out.display());
        let _ = writeln!(s, "data = {}", self.data.display());
        let _ = writeln!(s, "styles = {}", self.styles);
        for (path, hash) in &self.datasets {
            let _ = writeln!(s, "dataset {path} = {hash}");
        }
        for line in self.config.to_text().lines() {
            let _ = writeln!(s, "config {line}");
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut fields: BTreeMap<&str, &str> = BTreeMap::new();
        let mut datasets = BTreeMap::new();
        let mut config_text = String::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (key, value) = line
                .split_once(" = ")
                .ok_or_else(|| Error::Format(format!("bad manifest line: {line}")))?;
            if let Some(path) = key.strip_prefix("dataset ") {
                datasets.insert(path.to_string(), value.to_string());
            } else if let Some(k) = key.strip_prefix("config ") {
                let _ = writeln!(config_text, "{k} = {value}");
            } else {
                fields.insert(key, value);
            }
        }
        let field = |k: &str| {
            fields
                .get(k)
                .copied()
                .ok_or_else(|| Error::Format(format!("manifest lacks `{k}`")))
        };
        Ok(RunManifest {
            command: field("command")?.to_string(),
            version: field("version")?.to_string(),
            seed: field("seed")?
                .parse()
                .map_err(|_| Error::Format("bad manifest seed".into()))?,
            out: PathBuf::from(field("out")?),
            data: PathBuf::from(field("data")?),
            styles: field("styles")?
                .parse()
                .map_err(|_| Error::Format("bad manifest style count".into()))?,
            datasets,
            config: TrainConfig::parse(&config_text)?,
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST);
        std::fs::write(&path, self.to_text()).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Self::parse(&text)
    }
}

/// Creates `dir` for a new run. An existing non-empty directory is an error
/// unless `force`, in which case it is removed first.
pub fn prepare_output_dir(dir: &Path, force: bool) -> Result<()> {
    let occupied = dir.exists()
        && (dir.is_file()
            || std::fs::read_dir(dir)
                .map_err(|e| Error::io(dir, e))?
                .next()
                .is_some());
    if occupied {
        if !force {
            return Err(Error::Exists(dir.to_path_buf()));
        }
        let removed = if dir.is_file() {
            std::fs::remove_file(dir)
        } else {
            std::fs::remove_dir_all(dir)
        };
        removed.map_err(|e| Error::io(dir, e))?;
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Refuses to replace an existing file unless `force`.
pub fn check_output_file(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        return Err(Error::Exists(path.to_path_buf()));
    }
    Ok(())
}

pub fn step_tag(step: usize) -> String {
    format!("step-{step:08}")
}

pub fn checkpoint_paths(run: &Path, tag: &str) -> (PathBuf, PathBuf) {
    let dir = run.join(CHECKPOINTS);
    (dir.join(format!("{tag}.gen")), dir.join(format!("{tag}.disc")))
}

/// Records `tag` as the newest checkpoint.
pub fn set_latest(run: &Path, tag: &str) -> Result<()> {
    let path = run.join(CHECKPOINTS).join(LATEST);
    std::fs::write(&path, format!("{tag}\n")).map_err(|e| Error::io(&path, e))
}

pub fn latest_tag(run: &Path) -> Result<String> {
    let path = run.join(CHECKPOINTS).join(LATEST);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(text.trim().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("toy.train.0");
        std::fs::write(&data, "a b\n").unwrap();
        let mut config = TrainConfig::default();
        config.seed = 9;
        let m = RunManifest::new("train", &config, dir.path(), &dir.path().join("toy"), 2, &[data]).unwrap();
        m.save(dir.path()).unwrap();
        assert_eq!(RunManifest::load(dir.path()).unwrap(), m);
        assert_eq!(m.datasets.values().next().unwrap().len(), 64);
    }

    #[test]
    fn existing_directory_needs_force() {
        let dir = tempfile::tempdir().unwrap();
        let run = dir.path().join("run");
        prepare_output_dir(&run, false).unwrap();
        // Empty directories may be reused.
        prepare_output_dir(&run, false).unwrap();
        std::fs::write(run.join("x"), "1").unwrap();
        assert!(matches!(prepare_output_dir(&run, false), Err(Error::Exists(_))));
        prepare_output_dir(&run, true).unwrap();
        assert!(!run.join("x").exists());
    }

    #[test]
    fn latest_pointer() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir_all(dir.path().join(CHECKPOINTS)).unwrap();
        set_latest(dir.path(), &step_tag(200)).unwrap();
        assert_eq!(latest_tag(dir.path()).unwrap(), "step-00000200");
    }
}
