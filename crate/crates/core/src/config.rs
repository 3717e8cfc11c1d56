//! JSON experiment configuration. Unknown keys are rejected everywhere and
//! [`ExperimentConfig::validate`] runs before any data is touched.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{
    iid_partition, io, label_skew_partition, quantity_skew_partition, synth_blobs, vertical_partition, Dataset,
    PartitionPlan,
};
use crate::error::{Error, Result};
use crate::model::ModelSpec;
use crate::privacy::PrivacyConfig;
use crate::protocols::{Merge, Protocol, Relay, SflVariant, TrainConfig, TransportMode};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub protocol: Protocol,
    #[serde(default)]
    pub variant: SflVariant,
    #[serde(default)]
    pub relay: Relay,
    /// Model preset: `mlp-small` or `lenet-lite`.
    #[serde(default = "default_model")]
    pub model: String,
    /// Last layer of the client portion.
    #[serde(default = "one")]
    pub cut: usize,
    /// Last layer of the server portion in the U-shaped protocol.
    #[serde(default)]
    pub back_cut: Option<usize>,
    #[serde(default = "one")]
    pub clients: usize,
    #[serde(default)]
    pub partition: PartitionConfig,
    pub dataset: DatasetConfig,
    pub rounds: usize,
    #[serde(default = "one")]
    pub local_epochs: usize,
    #[serde(default = "default_batch")]
    pub batch: usize,
    #[serde(default = "default_lr")]
    pub lr: f32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "yes")]
    pub deterministic: bool,
    #[serde(default)]
    pub privacy: PrivacyConfig,
    #[serde(default)]
    pub transport: TransportMode,
    #[serde(default = "one")]
    pub sync_interval: usize,
    #[serde(default)]
    pub merge: Merge,
    /// Addresses used when roles run as separate processes.
    #[serde(default)]
    pub network: Option<NetworkConfig>,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub report: ReportConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemeName {
    Iid,
    LabelSkew,
    QuantitySkew,
    Vertical,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionConfig {
    /// Defaults to `vertical` for the vertical protocol and `iid` otherwise.
    #[serde(default)]
    pub scheme: Option<SchemeName>,
    #[serde(default)]
    pub classes_per_client: Option<usize>,
    /// Shard sizes. Required by `quantity_skew`; with `label_skew` the
    /// label-skewed shards are cut down to these sizes.
    #[serde(default)]
    pub sizes: Option<Vec<usize>>,
    /// Partition seed; the run seed when absent.
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    /// Gaussian clusters split into train and test rows.
    Blobs {
        n: usize,
        test: usize,
        classes: usize,
        dim: usize,
        #[serde(default = "default_separation")]
        separation: f64,
        #[serde(default)]
        seed: Option<u64>,
    },
    Sdsh { train: PathBuf, test: PathBuf },
    Csv {
        train: PathBuf,
        test: PathBuf,
        #[serde(default)]
        classes: Option<usize>,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        #[serde(default)]
        limit: Option<usize>,
    },
}

/// Listening addresses for multi-process runs. `peers[k]` is where client
/// `k` accepts its predecessor under peer-to-peer relay.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub main: String,
    #[serde(default)]
    pub fed: Option<String>,
    #[serde(default)]
    pub peers: Vec<String>,
    #[serde(default = "default_timeout")]
    pub connect_timeout_secs: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportConfig {
    /// Adds `dcor,kl_nats` columns to the metrics CSV.
    #[serde(default)]
    pub leakage: bool,
    #[serde(default = "default_bins")]
    pub bins: usize,
    #[serde(default = "yes")]
    pub ledger: bool,
    #[serde(default = "yes")]
    pub snapshot: bool,
    /// Saves a raw and smashed probe batch for the `leakage` command.
    #[serde(default)]
    pub leakage_batches: bool,
}

impl Default for ReportConfig {
    fn default() -> Self {
        Self { leakage: false, bins: default_bins(), ledger: true, snapshot: true, leakage_batches: false }
    }
}

fn one() -> usize {
    1
}
fn yes() -> bool {
    true
}
fn default_model() -> String {
    "mlp-small".into()
}
fn default_batch() -> usize {
    32
}
fn default_lr() -> f32 {
    0.05
}
fn default_separation() -> f64 {
    3.0
}
fn default_output() -> PathBuf {
    PathBuf::from("out")
}
fn default_timeout() -> u64 {
    30
}
fn default_bins() -> usize {
    crate::privacy::DEFAULT_BINS
}

/// An experiment's loaded data and partition, with its model spec.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub train: Dataset,
    pub test: Dataset,
    pub plan: PartitionPlan,
    pub model: ModelSpec,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn scheme(&self) -> SchemeName {
        self.partition.scheme.unwrap_or(if self.protocol == Protocol::SlVertical {
            SchemeName::Vertical
        } else {
            SchemeName::Iid
        })
    }

    /// Checks everything that does not need the data.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.clients == 0 {
            return bad("clients must be at least 1".into());
        }
        if self.rounds == 0 {
            return bad("rounds must be at least 1".into());
        }
        if !["mlp-small", "lenet-lite"].contains(&self.model.as_str()) {
            return bad(format!("unknown model preset {:?}", self.model));
        }
        let scheme = self.scheme();
        if (self.protocol == Protocol::SlVertical) != (scheme == SchemeName::Vertical) {
            return bad("the vertical protocol and the vertical partition go together".into());
        }
        if self.protocol == Protocol::Centralized && self.clients != 1 {
            return bad("centralized training uses a single client".into());
        }
        match scheme {
            SchemeName::LabelSkew if self.partition.classes_per_client.is_none() => {
                return bad("label_skew needs classes_per_client".into())
            }
            SchemeName::QuantitySkew if self.partition.sizes.is_none() => return bad("quantity_skew needs sizes".into()),
            _ => {}
        }
        if let Some(sizes) = &self.partition.sizes {
            if sizes.len() != self.clients {
                return bad(format!("{} shard sizes for {} clients", sizes.len(), self.clients));
            }
        }
        if self.protocol == Protocol::SlUshaped && self.back_cut.is_none() {
            return bad("sl_ushaped needs back_cut".into());
        }
        if self.report.leakage_batches && matches!(self.protocol, Protocol::Centralized | Protocol::Fl) {
            return bad("report.leakage_batches needs a protocol with a cut layer".into());
        }
        if self.report.bins < 2 {
            return bad("report.bins must be at least 2".into());
        }
        if let Some(net) = &self.network {
            if self.relay == Relay::P2p && net.peers.len() != self.clients {
                return bad("p2p relay needs one peer address per client".into());
            }
        }
        if let DatasetConfig::Blobs { n, test, classes, dim, .. } = self.dataset {
            if n == 0 || test == 0 || classes < 2 || dim == 0 {
                return bad("blobs need n, test, dim >= 1 and classes >= 2".into());
            }
        }
        self.train_config().validate()
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            rounds: self.rounds,
            local_epochs: self.local_epochs,
            batch_size: self.batch,
            lr: self.lr,
            seed: self.seed,
            deterministic: self.deterministic,
            privacy: self.privacy.clone(),
            relay: self.relay,
            sync_interval: self.sync_interval,
            transport: self.transport.clone(),
            leakage_bins: self.report.leakage.then_some(self.report.bins),
        }
    }

    pub fn load_data(&self) -> Result<(Dataset, Dataset)> {
        match &self.dataset {
            DatasetConfig::Blobs { n, test, classes, dim, separation, seed } => {
                let all = synth_blobs(n + test, *classes, *dim, *separation, seed.unwrap_or(self.seed))?;
                all.split_at(*n)
            }
            DatasetConfig::Sdsh { train, test } => Ok((io::read_sdsh(train)?, io::read_sdsh(test)?)),
            DatasetConfig::Csv { train, test, classes } => {
                let tr = io::read_csv(train, *classes)?;
                let te = io::read_csv(test, Some(classes.unwrap_or(tr.classes())))?;
                Ok((tr, te))
            }
            DatasetConfig::Idx { train_images, train_labels, test_images, test_labels, limit } => {
                Ok((io::read_idx(train_images, train_labels, *limit)?, io::read_idx(test_images, test_labels, *limit)?))
            }
        }
    }

    pub fn partition(&self, train: &Dataset) -> Result<PartitionPlan> {
        let seed = self.partition.seed.unwrap_or(self.seed);
        let k = self.clients;
        let plan = match self.scheme() {
            SchemeName::Iid => iid_partition(train.len(), k, seed)?,
            SchemeName::LabelSkew => {
                let cpc = self.partition.classes_per_client.unwrap_or(1);
                label_skew_partition(train.labels(), train.classes(), k, cpc, seed)?
            }
            SchemeName::QuantitySkew => {
                let sizes = self.partition.sizes.as_deref().unwrap_or_default();
                return quantity_skew_partition(train.len(), k, sizes, seed);
            }
            SchemeName::Vertical => {
                let [d] = train.sample_shape() else {
                    return Err(Error::Config("vertical partitions need flat samples".into()));
                };
                return vertical_partition(*d, k, seed);
            }
        };
        match &self.partition.sizes {
            Some(sizes) => plan.truncate_to(sizes, seed),
            None => Ok(plan),
        }
    }

    /// Loads the data, partitions it and builds the model spec.
    pub fn prepare(&self) -> Result<Prepared> {
        let (train, test) = self.load_data()?;
        if train.sample_shape() != test.sample_shape() || train.classes() != test.classes() {
            return Err(Error::Config("train and test sets disagree on sample shape or classes".into()));
        }
        let plan = self.partition(&train)?;
        let model = ModelSpec::preset(&self.model, train.sample_shape(), train.classes())?;
        Ok(Prepared { train, test, plan, model })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SMOKE: &str = r#"{
        "protocol": "sl",
        "dataset": {"kind": "blobs", "n": 200, "test": 50, "classes": 3, "dim": 6},
        "rounds": 2
    }"#;

    #[test]
    fn defaults_fill_in() {
        let c = ExperimentConfig::from_json(SMOKE).unwrap();
        assert_eq!(c.clients, 1);
        assert_eq!(c.batch, 32);
        assert_eq!(c.scheme(), SchemeName::Iid);
        assert!(c.report.ledger);
        let p = c.prepare().unwrap();
        assert_eq!(p.train.len(), 200);
        assert_eq!(p.plan.clients(), 1);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        let with = |extra: &str| SMOKE.replacen("\"rounds\": 2", &format!("\"rounds\": 2, {extra}"), 1);
        assert!(ExperimentConfig::from_json(&with("\"colour\": 1")).is_err());
        assert!(ExperimentConfig::from_json(&SMOKE.replace("\"sl\"", "\"sideways\"")).is_err());
        assert!(ExperimentConfig::from_json(&with("\"privacy\": {\"clip\": -1}")).is_err());
        assert!(ExperimentConfig::from_json(&with("\"privacy\": {\"loud\": true}")).is_err());
        assert!(ExperimentConfig::from_json(&with("\"partition\": {\"scheme\": \"label_skew\"}")).is_err());
        assert!(ExperimentConfig::from_json(&with("\"clients\": 2, \"partition\": {\"sizes\": [1]}")).is_err());
        assert!(ExperimentConfig::from_json(&with("\"report\": {\"bins\": 1}")).is_err());
        assert!(ExperimentConfig::from_json(&with("\"model\": \"resnet\"")).is_err());
        assert!(ExperimentConfig::from_json(&with("\"transport\": {\"mode\": \"tcp\"}")).is_ok());
    }

    #[test]
    fn vertical_protocol_defaults_to_feature_split() {
        let text = SMOKE.replace("\"sl\"", "\"sl_vertical\"").replace("\"rounds\": 2", "\"rounds\": 2, \"clients\": 2");
        let c = ExperimentConfig::from_json(&text).unwrap();
        let p = c.prepare().unwrap();
        assert_eq!(p.plan.feature_range(1).map(|r| r.len()), Some(3));
    }
}
