//! Declarative experiment configuration. A run is fully described by one
//! TOML file; the resolved form (every default filled in, every path made
//! absolute) is written next to the outputs so a run can be reproduced from
//! its own artifacts.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use fedsim_core::data::{
    gen_synthetic, load_dataset, partition_dirichlet, partition_iid, partition_shards, Dataset,
    PartitionPlan, PreprocessOpts,
};
use fedsim_core::error::{Error, Result};
use fedsim_core::fed::{EvalCrop, FederationConfig, Weighting};
use fedsim_core::model::{InputShape, ModelSpec};
use fedsim_core::optim::AdamWHyper;
use fedsim_core::seeding::stream_seed_u64;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSection,
    #[serde(default)]
    pub preprocess: PreprocessSection,
    #[serde(default)]
    pub partition: PartitionSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub federation: FederationSection,
    pub output: OutputSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    /// "synthetic" or "file".
    pub source: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub classes: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_per_class: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_per_class: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub channels: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub height: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub width: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection {
            source: "synthetic".into(),
            train: None,
            test: None,
            classes: None,
            train_per_class: None,
            test_per_class: None,
            channels: None,
            height: None,
            width: None,
            seed: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessSection {
    /// [height, width]; defaults to the full image.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub crop: Option<[usize; 2]>,
    pub flip_prob: f64,
    pub standardize: bool,
}

impl Default for PreprocessSection {
    fn default() -> Self {
        PreprocessSection {
            crop: None,
            flip_prob: 0.0,
            standardize: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PartitionSection {
    /// "iid", "dirichlet", or "shards".
    pub scheme: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub shards_per_client: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Default for PartitionSection {
    fn default() -> Self {
        PartitionSection {
            scheme: "iid".into(),
            alpha: None,
            shards_per_client: None,
            seed: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    /// "mlp" or "small_cnn".
    pub name: String,
    /// Hidden width of the mlp.
    pub hidden: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            name: "mlp".into(),
            hidden: 64,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FederationSection {
    pub clients: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub clients_per_round: Option<usize>,
    pub rounds: u64,
    pub local_epochs: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub proximal_mu: f64,
    pub seed: u64,
    /// Weight updates by n_i / N (device count) instead of n_i / sum(n_j).
    /// Demonstration only.
    pub device_count_weighting: bool,
    /// "center" or "random".
    pub eval_crop: String,
}

impl Default for FederationSection {
    fn default() -> Self {
        FederationSection {
            clients: 8,
            clients_per_round: None,
            rounds: 30,
            local_epochs: 2,
            batch_size: 32,
            learning_rate: 1e-3,
            weight_decay: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            proximal_mu: 0.0,
            seed: 0,
            device_count_weighting: false,
            eval_crop: "center".into(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
    #[serde(default = "default_formats")]
    pub formats: Vec<String>,
}

fn default_formats() -> Vec<String> {
    vec!["csv".into(), "json".into()]
}

/// A parsed config turned into runtime objects, plus the fully resolved
/// config ready to be written back out.
#[derive(Debug)]
pub struct ResolvedExperiment {
    pub config: ExperimentConfig,
    pub train: Dataset,
    pub test: Dataset,
    pub spec: ModelSpec,
    pub plan: PartitionPlan,
    pub preprocess: PreprocessOpts,
    pub federation: FederationConfig,
    pub emit_csv: bool,
    pub emit_json: bool,
    pub output_dir: PathBuf,
}

fn absolutize(path: &Path) -> Result<PathBuf> {
    if path.is_absolute() {
        Ok(path.to_path_buf())
    } else {
        Ok(std::env::current_dir()?.join(path))
    }
}

/// Seeds for the two synthetic splits, derived so a train/test pair never
/// shares noise but always shares the class templates.
pub fn synthetic_split_seeds(seed: u64) -> (u64, u64) {
    (
        stream_seed_u64(seed, "synth-train", 0, 0),
        stream_seed_u64(seed, "synth-test", 0, 0),
    )
}

pub fn resolve(mut config: ExperimentConfig) -> Result<ResolvedExperiment> {
    // Datasets.
    let (train, test) = match config.dataset.source.as_str() {
        "file" => {
            let train_path = config
                .dataset
                .train
                .as_ref()
                .ok_or_else(|| Error::Config("dataset.train is required for source = \"file\"".into()))?;
            let test_path = config
                .dataset
                .test
                .as_ref()
                .ok_or_else(|| Error::Config("dataset.test is required for source = \"file\"".into()))?;
            let train_path = absolutize(train_path)?;
            let test_path = absolutize(test_path)?;
            let train = load_dataset(&train_path)?;
            let test = load_dataset(&test_path)?;
            config.dataset.train = Some(train_path);
            config.dataset.test = Some(test_path);
            (train, test)
        }
        "synthetic" => {
            let classes = *config.dataset.classes.get_or_insert(4);
            let train_per_class = *config.dataset.train_per_class.get_or_insert(200);
            let test_per_class = *config.dataset.test_per_class.get_or_insert(50);
            let channels = *config.dataset.channels.get_or_insert(1);
            let height = *config.dataset.height.get_or_insert(16);
            let width = *config.dataset.width.get_or_insert(16);
            let seed = *config
                .dataset
                .seed
                .get_or_insert_with(|| stream_seed_u64(config.federation.seed, "dataset", 0, 0));
            let (train_seed, test_seed) = synthetic_split_seeds(seed);
            let train = gen_synthetic(classes, train_per_class, channels, height, width, train_seed)?;
            let test = gen_synthetic(classes, test_per_class, channels, height, width, test_seed)?;
            (train, test)
        }
        other => {
            return Err(Error::Config(format!(
                "dataset.source must be \"file\" or \"synthetic\", got \"{other}\""
            )))
        }
    };
    if train.channels() != test.channels()
        || train.height() != test.height()
        || train.width() != test.width()
        || train.classes() != test.classes()
    {
        return Err(Error::Config(
            "train and test splits disagree on image extents or class count".into(),
        ));
    }

    // Preprocessing.
    let crop = *config
        .preprocess
        .crop
        .get_or_insert([train.height(), train.width()]);
    let preprocess = PreprocessOpts {
        crop_height: crop[0],
        crop_width: crop[1],
        flip_prob: config.preprocess.flip_prob,
        standardize: config.preprocess.standardize,
    };
    preprocess.validate(train.height(), train.width())?;

    // Model.
    let input = InputShape::Image {
        channels: train.channels(),
        height: preprocess.crop_height,
        width: preprocess.crop_width,
    };
    let spec = match config.model.name.as_str() {
        "mlp" => ModelSpec::mlp(input, config.model.hidden, train.classes())?,
        "small_cnn" => ModelSpec::small_cnn(input, train.classes())?,
        other => {
            return Err(Error::Config(format!(
                "model.name must be \"mlp\" or \"small_cnn\", got \"{other}\""
            )))
        }
    };

    // Partition.
    let partition_seed = *config
        .partition
        .seed
        .get_or_insert_with(|| stream_seed_u64(config.federation.seed, "partition", 0, 0));
    let clients = config.federation.clients;
    let plan = match config.partition.scheme.as_str() {
        "iid" => partition_iid(&train, clients, partition_seed)?,
        "dirichlet" => {
            let alpha = config.partition.alpha.ok_or_else(|| {
                Error::Config("partition.alpha is required for scheme = \"dirichlet\"".into())
            })?;
            partition_dirichlet(&train, clients, alpha, partition_seed)?
        }
        "shards" => {
            let per_client = config.partition.shards_per_client.ok_or_else(|| {
                Error::Config(
                    "partition.shards_per_client is required for scheme = \"shards\"".into(),
                )
            })?;
            partition_shards(&train, clients, per_client, partition_seed)?
        }
        other => {
            return Err(Error::Config(format!(
                "partition.scheme must be \"iid\", \"dirichlet\", or \"shards\", got \"{other}\""
            )))
        }
    };

    // Federation.
    let clients_per_round = *config
        .federation
        .clients_per_round
        .get_or_insert(config.federation.clients);
    let eval_crop = match config.federation.eval_crop.as_str() {
        "center" => EvalCrop::Center,
        "random" => EvalCrop::Random,
        other => {
            return Err(Error::Config(format!(
                "federation.eval_crop must be \"center\" or \"random\", got \"{other}\""
            )))
        }
    };
    let federation = FederationConfig {
        clients: config.federation.clients,
        clients_per_round,
        rounds: config.federation.rounds,
        local_epochs: config.federation.local_epochs,
        batch_size: config.federation.batch_size,
        optimizer: AdamWHyper {
            learning_rate: config.federation.learning_rate,
            weight_decay: config.federation.weight_decay,
            beta1: config.federation.beta1,
            beta2: config.federation.beta2,
            epsilon: config.federation.epsilon,
        },
        proximal_mu: config.federation.proximal_mu,
        seed: config.federation.seed,
        weighting: if config.federation.device_count_weighting {
            Weighting::DeviceCount
        } else {
            Weighting::SampleProportional
        },
        eval_crop,
    };
    federation.validate()?;

    // Output.
    let output_dir = absolutize(&config.output.dir)?;
    config.output.dir = output_dir.clone();
    let mut emit_csv = false;
    let mut emit_json = false;
    for format in &config.output.formats {
        match format.as_str() {
            "csv" => emit_csv = true,
            "json" => emit_json = true,
            other => {
                return Err(Error::Config(format!(
                    "output.formats entries must be \"csv\" or \"json\", got \"{other}\""
                )))
            }
        }
    }

    Ok(ResolvedExperiment {
        config,
        train,
        test,
        spec,
        plan,
        preprocess,
        federation,
        emit_csv,
        emit_json,
        output_dir,
    })
}

pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    toml::from_str(text).map_err(|e| Error::Config(format!("cannot parse config: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
        [dataset]
        source = "synthetic"
        classes = 3
        train_per_class = 8
        test_per_class = 4
        height = 8
        width = 8

        [federation]
        clients = 2
        rounds = 1

        [output]
        dir = "out"
    "#;

    #[test]
    fn minimal_config_resolves_with_defaults() {
        let cfg = parse_config(MINIMAL).unwrap();
        let resolved = resolve(cfg).unwrap();
        assert_eq!(resolved.federation.clients_per_round, 2);
        assert_eq!(resolved.federation.batch_size, 32);
        assert_eq!(resolved.preprocess.crop_height, 8);
        assert_eq!(resolved.train.len(), 24);
        assert!(resolved.emit_csv && resolved.emit_json);
        assert!(resolved.config.output.dir.is_absolute());
    }

    #[test]
    fn resolution_is_idempotent() {
        let resolved = resolve(parse_config(MINIMAL).unwrap()).unwrap();
        let snapshot = toml::to_string_pretty(&resolved.config).unwrap();
        let again = resolve(parse_config(&snapshot).unwrap()).unwrap();
        assert_eq!(
            toml::to_string_pretty(&again.config).unwrap(),
            snapshot,
            "re-resolving a resolved config must be a fixed point"
        );
        assert_eq!(again.train, resolved.train);
        assert_eq!(again.plan, resolved.plan);
    }

    #[test]
    fn unknown_fields_are_parse_errors() {
        let bad = format!("{MINIMAL}\n[federation.typo]\nx = 1\n");
        assert!(parse_config(&bad).is_err());
        let err = parse_config("[dataset]\nsource = \"synthetic\"\nbogus = 1\n[output]\ndir = \"o\"")
            .unwrap_err();
        assert!(err.to_string().contains("bogus"));
    }

    #[test]
    fn dirichlet_scheme_requires_alpha() {
        let cfg_text = MINIMAL.replace(
            "[federation]",
            "[partition]\nscheme = \"dirichlet\"\n\n[federation]",
        );
        let err = resolve(parse_config(&cfg_text).unwrap()).unwrap_err();
        assert!(err.to_string().contains("alpha"));
    }

    #[test]
    fn bad_model_and_scheme_names_are_rejected() {
        let cfg_text = MINIMAL.replace("[federation]", "[model]\nname = \"resnet\"\n\n[federation]");
        assert!(resolve(parse_config(&cfg_text).unwrap()).is_err());
    }
}
