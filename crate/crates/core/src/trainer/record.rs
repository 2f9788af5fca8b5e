use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{hex_digest, TrainConfig};
use crate::error::{Error, Result};
use crate::network::NetworkSpec;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub config_hash: String,
    pub seed: u64,
    /// SHA-256 over the checkpoint manifest and tensor bytes.
    pub content_hash: String,
    pub steps_run: usize,
    pub stopped_early: bool,
    pub n_params: usize,
    pub tokens_seen: u64,
    /// `token_ratio × n_params`.
    pub token_budget: f64,
    pub initial_val_loss: f64,
    pub final_val_loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunRecord {
    pub config: TrainConfig,
    /// Training loss at steps 1..=steps_run, before each update.
    pub train_loss: Vec<f64>,
    /// `(step, loss)` for every validation pass, starting at step 0.
    pub val_loss: Vec<(usize, f64)>,
    pub checkpoint: NetworkSpec,
    pub manifest: RunManifest,
}

/// One line of the loss-curve CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub step: usize,
    pub train_loss: Option<f64>,
    pub val_loss: Option<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestFile {
    config: TrainConfig,
    run: RunManifest,
}

pub fn checkpoint_hash(net: &NetworkSpec) -> String {
    let (manifest, archive) = net.to_manifest();
    let (index, bytes) = archive.encode("checkpoint.bin");
    let mut buf = serde_json::to_vec(&manifest).expect("manifest serializes");
    buf.extend(serde_json::to_vec(&index).expect("index serializes"));
    buf.extend(bytes);
    hex_digest(&buf)
}

impl RunRecord {
    pub(crate) fn new(
        config: TrainConfig,
        train_loss: Vec<f64>,
        val_loss: Vec<(usize, f64)>,
        checkpoint: NetworkSpec,
        stopped_early: bool,
    ) -> Result<Self> {
        let steps_run = train_loss.len();
        let n_params = checkpoint.param_count();
        let manifest = RunManifest {
            config_hash: config.hash(),
            seed: config.seed,
            content_hash: checkpoint_hash(&checkpoint),
            steps_run,
            stopped_early,
            n_params,
            tokens_seen: (steps_run * config.tokens_per_step()) as u64,
            token_budget: config.token_ratio * n_params as f64,
            initial_val_loss: val_loss.first().map(|v| v.1).unwrap_or(f64::NAN),
            final_val_loss: val_loss.last().map(|v| v.1).unwrap_or(f64::NAN),
        };
        Ok(Self {
            config,
            train_loss,
            val_loss,
            checkpoint,
            manifest,
        })
    }

    pub fn loss_rows(&self) -> Vec<LossRow> {
        (0..=self.manifest.steps_run)
            .map(|step| LossRow {
                step,
                train_loss: step.checked_sub(1).map(|i| self.train_loss[i]),
                val_loss: self.val_loss.iter().find(|v| v.0 == step).map(|v| v.1),
            })
            .collect()
    }

    pub fn loss_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in self.loss_rows() {
            w.serialize(r)?;
        }
        String::from_utf8(w.into_inner().map_err(|e| Error::Io(e.into_error()))?)
            .map_err(|e| Error::Parse(e.to_string()))
    }

    /// Writes `manifest.json`, `losses.csv` and `checkpoint.json` (with its
    /// tensor archive) into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let file = ManifestFile {
            config: self.config.clone(),
            run: self.manifest.clone(),
        };
        std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&file)? + "\n")?;
        std::fs::write(dir.join("losses.csv"), self.loss_csv()?)?;
        self.checkpoint.save(&dir.join("checkpoint.json"))
    }

    /// Reads a directory written by [`RunRecord::write`] and checks the
    /// checkpoint against its recorded hash.
    pub fn read(dir: &Path) -> Result<Self> {
        let file: ManifestFile = serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)?;
        let rows = parse_loss_csv(&std::fs::read_to_string(dir.join("losses.csv"))?)?;
        let checkpoint = NetworkSpec::load(&dir.join("checkpoint.json"), None)?;
        if checkpoint_hash(&checkpoint) != file.run.content_hash {
            return Err(Error::Parse("checkpoint does not match manifest content hash".into()));
        }
        let train_loss = rows.iter().filter_map(|r| r.train_loss).collect();
        let val_loss = rows.iter().filter_map(|r| r.val_loss.map(|v| (r.step, v))).collect();
        Ok(Self {
            config: file.config,
            train_loss,
            val_loss,
            checkpoint,
            manifest: file.run,
        })
    }
}

pub fn parse_loss_csv(text: &str) -> Result<Vec<LossRow>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let headers = r.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != ["step", "train_loss", "val_loss"] {
        return Err(Error::Parse(format!("unexpected loss CSV header {headers:?}")));
    }
    let rows: Vec<LossRow> = r.deserialize().collect::<std::result::Result<_, _>>()?;
    for (i, row) in rows.iter().enumerate() {
        if row.step != i {
            return Err(Error::Parse(format!("loss CSV row {i} has step {}", row.step)));
        }
        if row.train_loss.iter().chain(&row.val_loss).any(|v| !v.is_finite()) {
            return Err(Error::Parse(format!("non-finite loss at step {i}")));
        }
    }
    Ok(rows)
}
