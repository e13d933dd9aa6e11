//! Config-driven experiment pipeline: `gen`, `train`, `backfill`, `analyze`.
//!
//! A run directory holds one subdirectory per seed:
//!
//! ```text
//! out/config.json
//! out/seed-<s>/world/{train,gallery,query}_{old,new}.ffs
//! out/seed-<s>/manifest.json
//! out/seed-<s>/ckpt/{head,align}.ffn
//! out/seed-<s>/train_loss.csv, out/seed-<s>/train_summary.json
//! out/seed-<s>/backfill/<policy>.{csv,json}
//! out/summary.{csv,json}
//! out/analysis.json, out/analysis_{tau,flips,fractions}.csv
//! ```
//!
//! Every CSV starts with a `# config_hash=… seed=…` comment line and every
//! JSON document carries `config_hash` and the seed(s). Per-run seeds for
//! the world, both trainers and random orderings are derived from the
//! configured seed, so a run is fully determined by the config.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::alignment::{
    item_losses, predict_log_var, train_alignment, train_head, transform, AlignNet, ClassifierHead,
    EpochStats, TrainConfig, TrainingLog,
};
use crate::backfill::{
    backfill_curve, kendall_tau, make_ordering, order_by_score, BackfillPlan, BackfillReport,
    FractionPoint, OrderingInputs, OrderingPolicy,
};
use crate::error::{Error, Result};
use crate::features::{PairedFeatureSet, SetRole};
use crate::retrieval::{DistanceKind, Metric};
use crate::store::{read_feature_set, write_atomic, write_feature_set};
use crate::world::{generate_world, SyntheticWorldConfig, World};

/// The shipped configs, by name.
pub const SHIPPED_CONFIGS: &[(&str, &str)] = &[
    (
        "desk-imagenet",
        include_str!("../configs/desk-imagenet.json"),
    ),
    ("desk-bias", include_str!("../configs/desk-bias.json")),
];

pub fn shipped_config(name: &str) -> Option<ExperimentConfig> {
    SHIPPED_CONFIGS
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, text)| ExperimentConfig::from_json(text).expect("shipped config is valid"))
}

fn default_metrics() -> Vec<Metric> {
    vec![Metric::CmcTop(1), Metric::CmcTop(5), Metric::Map]
}

fn default_distance() -> DistanceKind {
    DistanceKind::L2
}

fn default_grid() -> usize {
    21
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub world: SyntheticWorldConfig,
    pub head_train: TrainConfig,
    pub align_train: TrainConfig,
    pub policies: Vec<OrderingPolicy>,
    #[serde(default = "default_metrics")]
    pub metrics: Vec<Metric>,
    #[serde(default = "default_distance")]
    pub distance: DistanceKind,
    #[serde(default = "default_grid")]
    pub alpha_grid_size: usize,
    pub seeds: Vec<u64>,
    /// Not part of the config hash.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

/// Stream tags for derived seeds.
const STREAM_WORLD: &str = "world";
const STREAM_HEAD: &str = "head";
const STREAM_ALIGN: &str = "align";
const STREAM_ORDER: &str = "order";

/// A seed for one independent random stream of a run.
pub fn derive_seed(seed: u64, stream: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(stream.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "need at least one seed"));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::config("seeds", "seeds must be distinct"));
        }
        if self.policies.is_empty() {
            return Err(Error::config(
                "policies",
                "need at least one ordering policy",
            ));
        }
        let slugs: std::collections::BTreeSet<String> =
            self.policies.iter().map(|p| p.slug()).collect();
        if slugs.len() != self.policies.len() {
            return Err(Error::config("policies", "policies must be distinct"));
        }
        if self.metrics.is_empty() {
            return Err(Error::config("metrics", "need at least one metric"));
        }
        if self.alpha_grid_size < 2 {
            return Err(Error::config(
                "alpha_grid_size",
                "need at least 2 grid points",
            ));
        }
        self.world.validate()?;
        let n_train = self.world.num_classes * self.world.train_per_class;
        let n_gallery = self.world.num_classes * self.world.gallery_per_class;
        if let Some(Metric::CmcTop(k)) = self.metrics.iter().find(|m| m.depth() > n_gallery) {
            return Err(Error::config(
                "metrics",
                format!("cmc_top{k} exceeds the gallery size {n_gallery}"),
            ));
        }
        self.head_train
            .validate(n_train)
            .map_err(|e| prefix_field("head_train", e))?;
        self.align_train
            .validate(n_train)
            .map_err(|e| prefix_field("align_train", e))?;
        Ok(())
    }

    /// Hex SHA-256 prefix of the canonical JSON form, without `output_dir`.
    pub fn config_hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = None;
        let bytes = serde_json::to_vec(&c).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))[..16].to_string()
    }

    pub fn with_seed_override(mut self, seed: u64) -> Self {
        self.seeds = vec![seed];
        self
    }

    pub fn world_for(&self, seed: u64) -> SyntheticWorldConfig {
        SyntheticWorldConfig {
            seed: derive_seed(seed, STREAM_WORLD),
            ..self.world.clone()
        }
    }

    pub fn head_train_for(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            seed: derive_seed(seed, STREAM_HEAD),
            ..self.head_train.clone()
        }
    }

    pub fn align_train_for(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            seed: derive_seed(seed, STREAM_ALIGN),
            ..self.align_train.clone()
        }
    }

    pub fn order_seed_for(&self, seed: u64) -> u64 {
        derive_seed(seed, STREAM_ORDER)
    }
}

fn prefix_field(prefix: &str, e: Error) -> Error {
    match e {
        Error::Config { field, reason } => Error::config(format!("{prefix}.{field}"), reason),
        other => other,
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::format(0, format!("{}: {e}", path.display())))
}

/// CSV bytes with a leading comment line.
fn csv_bytes(comment: &str, header: &[&str], rows: &[Vec<String>]) -> Result<Vec<u8>> {
    let mut out = format!("# {comment}\n").into_bytes();
    {
        let mut w = csv::Writer::from_writer(&mut out);
        let csv_err = |e: csv::Error| Error::invalid(format!("csv encoding: {e}"));
        w.write_record(header).map_err(csv_err)?;
        for r in rows {
            w.write_record(r).map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::io("<csv buffer>", e))?;
    }
    Ok(out)
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

const WORLD_FILES: [(&str, SetRole); 3] = [
    ("train", SetRole::Train),
    ("gallery", SetRole::Gallery),
    ("query", SetRole::Query),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub seed: u64,
    pub world_seed: u64,
    /// File name → SHA-256 of its bytes.
    pub files: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub config_hash: String,
    pub seed: u64,
    pub head_accuracy_train: f64,
    pub initial_loss: f64,
    pub final_loss: f64,
    /// File name → SHA-256 of the checkpoint bytes.
    pub checkpoints: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackfillRun {
    pub config_hash: String,
    pub seed: u64,
    pub policy: OrderingPolicy,
    pub report: BackfillReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub policy: OrderingPolicy,
    pub metric: Metric,
    /// M̃ mean over seeds.
    pub mean: f64,
    /// Sample standard deviation over seeds (0 for a single seed).
    pub std: f64,
    pub per_seed: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub config_hash: String,
    pub name: String,
    pub seeds: Vec<u64>,
    pub rows: Vec<SummaryRow>,
}

impl Summary {
    pub fn row(&self, policy: &OrderingPolicy, metric: Metric) -> Option<&SummaryRow> {
        self.rows
            .iter()
            .find(|r| &r.policy == policy && r.metric == metric)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedCorrelations {
    pub seed: u64,
    /// τ between the σ² order and the per-item `L_l2 + L_disc` order.
    pub tau_l2_plus_disc: f64,
    pub tau_l2: f64,
    pub tau_disc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlipRow {
    pub seed: u64,
    pub policy: OrderingPolicy,
    pub metric: Metric,
    pub alpha: f64,
    pub value: f64,
    pub positive: usize,
    pub negative: usize,
    /// `value(α) − value(0) == (positive − negative) / |Q|` on reload.
    pub identity_holds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FractionCurve {
    pub seed: u64,
    pub policy: OrderingPolicy,
    pub points: Vec<FractionPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Analysis {
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub correlations: Vec<SeedCorrelations>,
    pub flips: Vec<FlipRow>,
    pub flip_identity_holds: bool,
    pub backfilled_fractions: Vec<FractionCurve>,
}

/// World, head and alignment net for one seed, trained in memory.
#[derive(Debug, Clone)]
pub struct SeedModels {
    pub world: World,
    pub head: ClassifierHead,
    pub net: AlignNet,
    pub log: TrainingLog,
}

/// Generates and trains one seed without touching the filesystem.
pub fn train_seed(cfg: &ExperimentConfig, seed: u64) -> Result<SeedModels> {
    let world = generate_world(&cfg.world_for(seed))?;
    let head = train_head(&world.train.new, &cfg.head_train_for(seed))?;
    let trained = train_alignment(&world.train, &head, &cfg.align_train_for(seed))?;
    Ok(SeedModels {
        world,
        head,
        net: trained.net,
        log: trained.log,
    })
}

/// Backfilling order of the gallery under `policy` for a trained seed.
pub fn seed_ordering(
    cfg: &ExperimentConfig,
    seed: u64,
    policy: &OrderingPolicy,
    world: &World,
    head: &ClassifierHead,
    net: &AlignNet,
) -> Result<Vec<u64>> {
    let inputs = OrderingInputs {
        gallery_old: &world.gallery.old,
        net: Some(net),
        head: Some(head),
        cheat_pairs: Some(&world.gallery),
        seed: cfg.order_seed_for(seed),
        label_smoothing_eps: cfg.align_train.loss.label_smoothing_eps,
    };
    make_ordering(policy, &inputs)
}

/// Backfilling curve of one policy for a trained seed.
pub fn seed_report(
    cfg: &ExperimentConfig,
    seed: u64,
    policy: &OrderingPolicy,
    world: &World,
    head: &ClassifierHead,
    net: &AlignNet,
) -> Result<BackfillReport> {
    let order = seed_ordering(cfg, seed, policy, world, head, net)?;
    let plan = BackfillPlan::uniform(order, cfg.alpha_grid_size)?;
    let transformed = transform(net, &world.gallery.old)?;
    backfill_curve(
        &plan,
        &transformed,
        &world.gallery.new,
        &world.query.new,
        &cfg.metrics,
        cfg.distance,
    )
}

/// Kendall-Tau between the σ² order and each per-item loss order on the gallery.
pub fn sigma_loss_correlations(
    seed: u64,
    world: &World,
    head: &ClassifierHead,
    net: &AlignNet,
    eps: f64,
) -> Result<SeedCorrelations> {
    let ids = world.gallery.old.ids();
    let sigma = order_by_score(ids, &predict_log_var(net, &world.gallery.old)?, true)?;
    let losses = item_losses(net, head, &world.gallery, eps)?;
    Ok(SeedCorrelations {
        seed,
        tau_l2_plus_disc: kendall_tau(&sigma, &order_by_score(ids, &losses.combined, true)?)?,
        tau_l2: kendall_tau(&sigma, &order_by_score(ids, &losses.l2, true)?)?,
        tau_disc: kendall_tau(&sigma, &order_by_score(ids, &losses.disc, true)?)?,
    })
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// A configured experiment bound to an output directory.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub out_dir: PathBuf,
    pub config_hash: String,
}

impl Experiment {
    /// `out_dir` overrides the config's `output_dir`.
    pub fn new(config: ExperimentConfig, out_dir: Option<PathBuf>) -> Result<Self> {
        config.validate()?;
        let out_dir = out_dir
            .or_else(|| config.output_dir.clone())
            .ok_or_else(|| Error::config("output_dir", "no output directory given"))?;
        let config_hash = config.config_hash();
        Ok(Self {
            config,
            out_dir,
            config_hash,
        })
    }

    /// Reopens a run directory from its `config.json`.
    pub fn open(run_dir: &Path) -> Result<Self> {
        let path = run_dir.join("config.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Self::new(
            ExperimentConfig::from_json(&text)?,
            Some(run_dir.to_path_buf()),
        )
    }

    pub fn seed_dir(&self, seed: u64) -> PathBuf {
        self.out_dir.join(format!("seed-{seed}"))
    }

    fn comment(&self, seed: u64) -> String {
        format!("config_hash={} seed={}", self.config_hash, seed)
    }

    fn write_config(&self) -> Result<()> {
        create_dir(&self.out_dir)?;
        let mut c = self.config.clone();
        c.output_dir = None;
        write_json(&self.out_dir.join("config.json"), &c)
    }

    fn world_path(&self, seed: u64, split: &str, side: &str) -> PathBuf {
        self.seed_dir(seed)
            .join("world")
            .join(format!("{split}_{side}.ffs"))
    }

    /// Writes every seed's world and manifest.
    pub fn gen(&self) -> Result<Vec<Manifest>> {
        self.write_config()?;
        self.config
            .seeds
            .par_iter()
            .map(|&seed| self.gen_seed(seed))
            .collect()
    }

    fn gen_seed(&self, seed: u64) -> Result<Manifest> {
        let world_cfg = self.config.world_for(seed);
        let world = generate_world(&world_cfg)?;
        create_dir(&self.seed_dir(seed).join("world"))?;
        let mut files = BTreeMap::new();
        for (split, _) in WORLD_FILES {
            let pair = match split {
                "train" => &world.train,
                "gallery" => &world.gallery,
                _ => &world.query,
            };
            for (side, set) in [("old", &pair.old), ("new", &pair.new)] {
                let path = self.world_path(seed, split, side);
                write_feature_set(set, &path)?;
                let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
                files.insert(format!("world/{split}_{side}.ffs"), sha256_hex(&bytes));
            }
        }
        let manifest = Manifest {
            config_hash: self.config_hash.clone(),
            seed,
            world_seed: world_cfg.seed,
            files,
        };
        write_json(&self.seed_dir(seed).join("manifest.json"), &manifest)?;
        Ok(manifest)
    }

    /// Reads a seed's world back from disk.
    pub fn load_world(&self, seed: u64) -> Result<World> {
        let mut pairs = Vec::new();
        for (split, role) in WORLD_FILES {
            let old = read_feature_set(&self.world_path(seed, split, "old"), role)?;
            let new = read_feature_set(&self.world_path(seed, split, "new"), role)?;
            pairs.push(PairedFeatureSet::new(old, new)?);
        }
        let query = pairs.pop().expect("three splits");
        let gallery = pairs.pop().expect("three splits");
        let train = pairs.pop().expect("three splits");
        Ok(World {
            train,
            gallery,
            query,
        })
    }

    fn ckpt_path(&self, seed: u64, name: &str) -> PathBuf {
        self.seed_dir(seed).join("ckpt").join(name)
    }

    /// Trains head and alignment net for every seed from the generated worlds.
    pub fn train(&self) -> Result<Vec<TrainSummary>> {
        self.write_config()?;
        self.config
            .seeds
            .par_iter()
            .map(|&seed| self.train_seed(seed))
            .collect()
    }

    fn train_seed(&self, seed: u64) -> Result<TrainSummary> {
        let world = self.load_world(seed)?;
        let head = train_head(&world.train.new, &self.config.head_train_for(seed))?;
        let trained = train_alignment(&world.train, &head, &self.config.align_train_for(seed))?;
        create_dir(&self.seed_dir(seed).join("ckpt"))?;
        let mut checkpoints = BTreeMap::new();
        for (name, bytes) in [
            ("head.ffn", head.encode()),
            ("align.ffn", trained.net.encode()),
        ] {
            write_atomic(&self.ckpt_path(seed, name), &bytes)?;
            checkpoints.insert(format!("ckpt/{name}"), sha256_hex(&bytes));
        }
        let log = &trained.log;
        let mut rows = Vec::new();
        let mut push = |phase: &str, s: &EpochStats| {
            rows.push(vec![
                phase.to_string(),
                s.epoch.to_string(),
                s.mean_loss.to_string(),
                s.mean_l2.to_string(),
                s.mean_disc.to_string(),
                s.lr.to_string(),
            ]);
        };
        push("initial", &log.initial);
        for e in &log.epochs {
            push("epoch", e);
        }
        push("final", &log.final_eval);
        if let Some(bad) = rows.iter().find(|r| {
            r[2..]
                .iter()
                .any(|v| !v.parse::<f64>().is_ok_and(f64::is_finite))
        }) {
            return Err(Error::Divergence {
                step: bad[1].parse().unwrap_or(0),
                detail: "non-finite training loss".into(),
            });
        }
        let csv = csv_bytes(
            &self.comment(seed),
            &["phase", "epoch", "mean_loss", "mean_l2", "mean_disc", "lr"],
            &rows,
        )?;
        write_atomic(&self.seed_dir(seed).join("train_loss.csv"), &csv)?;
        let summary = TrainSummary {
            config_hash: self.config_hash.clone(),
            seed,
            head_accuracy_train: head.accuracy(&world.train.new)?,
            initial_loss: log.initial.mean_loss,
            final_loss: log.final_eval.mean_loss,
            checkpoints,
        };
        write_json(&self.seed_dir(seed).join("train_summary.json"), &summary)?;
        Ok(summary)
    }

    /// Reads a seed's checkpoints.
    pub fn load_models(&self, seed: u64) -> Result<(ClassifierHead, AlignNet)> {
        let read = |name: &str| {
            let p = self.ckpt_path(seed, name);
            std::fs::read(&p).map_err(|e| Error::io(&p, e))
        };
        Ok((
            ClassifierHead::decode(&read("head.ffn")?)?,
            AlignNet::decode(&read("align.ffn")?)?,
        ))
    }

    fn report_path(&self, seed: u64, policy: &OrderingPolicy, ext: &str) -> PathBuf {
        self.seed_dir(seed)
            .join("backfill")
            .join(format!("{}.{ext}", policy.slug()))
    }

    /// Runs every policy for every seed and writes the cross-policy summary.
    pub fn backfill(&self) -> Result<Summary> {
        self.write_config()?;
        let per_seed: Vec<Vec<BackfillRun>> = self
            .config
            .seeds
            .par_iter()
            .map(|&seed| self.backfill_seed(seed))
            .collect::<Result<_>>()?;
        let mut rows = Vec::new();
        for (pi, policy) in self.config.policies.iter().enumerate() {
            for &metric in &self.config.metrics {
                let per_seed: Vec<f64> = per_seed
                    .iter()
                    .map(|runs| runs[pi].report.m_tilde[&metric])
                    .collect();
                let (mean, std) = mean_std(&per_seed);
                rows.push(SummaryRow {
                    policy: policy.clone(),
                    metric,
                    mean,
                    std,
                    per_seed,
                });
            }
        }
        let summary = Summary {
            config_hash: self.config_hash.clone(),
            name: self.config.name.clone(),
            seeds: self.config.seeds.clone(),
            rows,
        };
        write_json(&self.out_dir.join("summary.json"), &summary)?;
        let csv_rows: Vec<Vec<String>> = summary
            .rows
            .iter()
            .map(|r| {
                vec![
                    r.policy.to_string(),
                    r.metric.to_string(),
                    r.mean.to_string(),
                    r.std.to_string(),
                ]
            })
            .collect();
        let csv = csv_bytes(
            &format!(
                "config_hash={} seeds={}",
                self.config_hash,
                seed_list(&self.config.seeds)
            ),
            &["policy", "metric", "m_tilde_mean", "m_tilde_std"],
            &csv_rows,
        )?;
        write_atomic(&self.out_dir.join("summary.csv"), &csv)?;
        Ok(summary)
    }

    fn backfill_seed(&self, seed: u64) -> Result<Vec<BackfillRun>> {
        let world = self.load_world(seed)?;
        let (head, net) = self.load_models(seed)?;
        create_dir(&self.seed_dir(seed).join("backfill"))?;
        let mut runs = Vec::new();
        for policy in &self.config.policies {
            let report = seed_report(&self.config, seed, policy, &world, &head, &net)?;
            let run = BackfillRun {
                config_hash: self.config_hash.clone(),
                seed,
                policy: policy.clone(),
                report,
            };
            write_json(&self.report_path(seed, policy, "json"), &run)?;
            let csv = csv_bytes(
                &format!("{} policy={policy}", self.comment(seed)),
                &[
                    "alpha",
                    "metric",
                    "value",
                    "subgroup",
                    "pos_flips",
                    "neg_flips",
                ],
                &report_rows(&run.report),
            )?;
            write_atomic(&self.report_path(seed, policy, "csv"), &csv)?;
            runs.push(run);
        }
        Ok(runs)
    }

    /// Loads one backfill run written by [`Experiment::backfill`].
    pub fn load_run(&self, seed: u64, policy: &OrderingPolicy) -> Result<BackfillRun> {
        read_json(&self.report_path(seed, policy, "json"))
    }

    /// σ–loss correlations, flip curves and subgroup backfill fractions.
    pub fn analyze(&self) -> Result<Analysis> {
        let per_seed: Vec<(SeedCorrelations, Vec<FlipRow>, Vec<FractionCurve>)> = self
            .config
            .seeds
            .par_iter()
            .map(|&seed| self.analyze_seed(seed))
            .collect::<Result<_>>()?;
        let mut analysis = Analysis {
            config_hash: self.config_hash.clone(),
            seeds: self.config.seeds.clone(),
            correlations: Vec::new(),
            flips: Vec::new(),
            flip_identity_holds: true,
            backfilled_fractions: Vec::new(),
        };
        for (c, f, b) in per_seed {
            analysis.correlations.push(c);
            analysis.flips.extend(f);
            analysis.backfilled_fractions.extend(b);
        }
        analysis.flip_identity_holds = analysis.flips.iter().all(|f| f.identity_holds);
        write_json(&self.out_dir.join("analysis.json"), &analysis)?;

        let comment = format!(
            "config_hash={} seeds={}",
            self.config_hash,
            seed_list(&self.config.seeds)
        );
        let tau_rows: Vec<Vec<String>> = analysis
            .correlations
            .iter()
            .flat_map(|c| {
                [
                    ("l2_plus_disc", c.tau_l2_plus_disc),
                    ("l2", c.tau_l2),
                    ("disc", c.tau_disc),
                ]
                .map(|(name, tau)| vec![c.seed.to_string(), name.to_string(), tau.to_string()])
            })
            .collect();
        write_atomic(
            &self.out_dir.join("analysis_tau.csv"),
            &csv_bytes(&comment, &["seed", "loss", "kendall_tau"], &tau_rows)?,
        )?;
        let flip_rows: Vec<Vec<String>> = analysis
            .flips
            .iter()
            .map(|f| {
                vec![
                    f.seed.to_string(),
                    f.policy.to_string(),
                    f.metric.to_string(),
                    f.alpha.to_string(),
                    f.value.to_string(),
                    f.positive.to_string(),
                    f.negative.to_string(),
                    f.identity_holds.to_string(),
                ]
            })
            .collect();
        write_atomic(
            &self.out_dir.join("analysis_flips.csv"),
            &csv_bytes(
                &comment,
                &[
                    "seed",
                    "policy",
                    "metric",
                    "alpha",
                    "value",
                    "pos_flips",
                    "neg_flips",
                    "identity_holds",
                ],
                &flip_rows,
            )?,
        )?;
        let mut frac_rows = Vec::new();
        for c in &analysis.backfilled_fractions {
            for p in &c.points {
                for s in &p.subgroups {
                    frac_rows.push(vec![
                        c.seed.to_string(),
                        c.policy.to_string(),
                        p.alpha.to_string(),
                        s.subgroup.to_string(),
                        s.fraction.to_string(),
                    ]);
                }
            }
        }
        write_atomic(
            &self.out_dir.join("analysis_fractions.csv"),
            &csv_bytes(
                &comment,
                &["seed", "policy", "alpha", "subgroup", "backfilled_fraction"],
                &frac_rows,
            )?,
        )?;
        Ok(analysis)
    }

    fn analyze_seed(
        &self,
        seed: u64,
    ) -> Result<(SeedCorrelations, Vec<FlipRow>, Vec<FractionCurve>)> {
        let world = self.load_world(seed)?;
        let (head, net) = self.load_models(seed)?;
        let corr = sigma_loss_correlations(
            seed,
            &world,
            &head,
            &net,
            self.config.align_train.loss.label_smoothing_eps,
        )?;
        let mut flips = Vec::new();
        let mut fractions = Vec::new();
        for policy in &self.config.policies {
            let run = self.load_run(seed, policy)?;
            if run.config_hash != self.config_hash {
                return Err(Error::invalid(format!(
                    "report for seed {seed} policy {policy} has config hash {}, expected {}",
                    run.config_hash, self.config_hash
                )));
            }
            flips.extend(flip_rows(seed, policy, &run.report));
            if !run.report.backfilled_fractions.is_empty() {
                fractions.push(FractionCurve {
                    seed,
                    policy: policy.clone(),
                    points: run.report.backfilled_fractions.clone(),
                });
            }
        }
        Ok((corr, flips, fractions))
    }
}

fn seed_list(seeds: &[u64]) -> String {
    seeds
        .iter()
        .map(u64::to_string)
        .collect::<Vec<_>>()
        .join(",")
}

/// Flip rows of every top-k metric of a report, with the identity rechecked.
pub fn flip_rows(seed: u64, policy: &OrderingPolicy, report: &BackfillReport) -> Vec<FlipRow> {
    let nq = report.num_queries as f64;
    let mut rows = Vec::new();
    for &metric in &report.metrics {
        let Metric::CmcTop(_) = metric else { continue };
        let base = report.value(0, metric).map_or(0.0, |m| m.value);
        for (i, p) in report.points.iter().enumerate() {
            let Some(mp) = report.value(i, metric) else {
                continue;
            };
            let f = mp.flips.unwrap_or(crate::backfill::Flips {
                positive: 0,
                negative: 0,
            });
            let lhs = mp.value - base;
            let rhs = if nq > 0.0 {
                (f.positive as f64 - f.negative as f64) / nq
            } else {
                0.0
            };
            rows.push(FlipRow {
                seed,
                policy: policy.clone(),
                metric,
                alpha: p.alpha,
                value: mp.value,
                positive: f.positive,
                negative: f.negative,
                identity_holds: (lhs - rhs).abs() <= 1e-12,
            });
        }
    }
    rows
}

/// CSV rows of a report: overall rows with flips, then per-subgroup and gap rows.
pub fn report_rows(report: &BackfillReport) -> Vec<Vec<String>> {
    let mut rows = Vec::new();
    for p in &report.points {
        for m in &p.metrics {
            let (pos, neg) = m.flips.map_or((String::new(), String::new()), |f| {
                (f.positive.to_string(), f.negative.to_string())
            });
            rows.push(vec![
                p.alpha.to_string(),
                m.metric.to_string(),
                m.value.to_string(),
                "all".into(),
                pos,
                neg,
            ]);
            for s in &m.subgroups {
                rows.push(vec![
                    p.alpha.to_string(),
                    m.metric.to_string(),
                    s.value.to_string(),
                    s.subgroup.to_string(),
                    String::new(),
                    String::new(),
                ]);
            }
            if let Some(g) = m.gap {
                rows.push(vec![
                    p.alpha.to_string(),
                    m.metric.to_string(),
                    g.to_string(),
                    "gap".into(),
                    String::new(),
                    String::new(),
                ]);
            }
        }
    }
    rows
}
