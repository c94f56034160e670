//! End-to-end runs: configuration, variants, and the pretrain, meta-train,
//! meta-test and ablation procedures with their on-disk artifacts.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::AtomicBool;

use image::RgbImage;
use log::{info, warn};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::loss::{init_discriminator, DiscriminatorConfig, ExtractorConfig, FeatureExtractor, LossWeights};
use crate::meta::{
    meta_train, pretrain, AdaptConfig, AdaptVariant, Algorithm, MetaConfig, OptimizerKind, PretrainConfig, RunFiles,
    SynthMode, TrainContext, TrainState,
};
use crate::metrics::{
    aggregate, evaluate_episodes, format_summary, proxy_fid, write_reports, GeneratorSpec, MetricsRecord, Summary,
};
use crate::model::{init_params, ModelConfig};
use crate::sampling::{build_episodes, load_episodes, save_episodes, Episode, SamplerConfig};
use crate::synth::{mix_seed, write_atomic, Dataset, DatasetConfig, POSE_CHANNELS};
use crate::types::Frame;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataSection {
    pub dataset: DatasetConfig,
    /// Directory holding `manifest.json`; defaults to `<out_dir>/data`.
    pub root: Option<PathBuf>,
    pub sampler: SamplerConfig,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            dataset: DatasetConfig::default(),
            root: None,
            sampler: SamplerConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossSection {
    pub weights: LossWeights,
    pub extractor: ExtractorConfig,
    pub discriminator: DiscriminatorConfig,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSection {
    pub pretrain: PretrainConfig,
    pub meta: MetaConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSection {
    pub shots: Vec<usize>,
    pub adapt: AdaptConfig,
    pub workers: usize,
    /// Episodes per shot count that get a PNG strip.
    pub strip_episodes: usize,
    pub fid: bool,
    pub episode_seed: u64,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            shots: vec![3, 5, 8, 10],
            adapt: AdaptConfig::default(),
            workers: 1,
            strip_episodes: 8,
            fid: true,
            episode_seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub name: String,
    /// Root of every sub-seed; see [`ExperimentConfig::with_seed`].
    pub seed: u64,
    pub out_dir: PathBuf,
    pub data: DataSection,
    pub model: ModelConfig,
    pub loss: LossSection,
    pub meta: TrainSection,
    pub eval: EvalSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "metadance".into(),
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            data: DataSection::default(),
            model: ModelConfig::default(),
            loss: LossSection::default(),
            meta: TrainSection::default(),
            eval: EvalSection::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }

    /// Checks every section and their agreement on resolution and channels.
    pub fn validate(&self) -> Result<()> {
        self.data.dataset.validate()?;
        self.data.sampler.validate()?;
        self.model.validate()?;
        if self.model.resolution != self.data.dataset.resolution {
            return Err(Error::Config(format!(
                "model resolution {:?} differs from data resolution {:?}",
                self.model.resolution, self.data.dataset.resolution
            )));
        }
        if self.model.pose_channels != POSE_CHANNELS {
            return Err(Error::Config(format!(
                "model expects {} pose channels, data provides {POSE_CHANNELS}",
                self.model.pose_channels
            )));
        }
        self.loss.weights.validate()?;
        self.loss.discriminator.validate(self.model.resolution)?;
        let depth = self.loss.extractor.channels.len();
        let f = 1usize << depth;
        if self.model.resolution.height % f != 0 || self.model.resolution.width % f != 0 {
            return Err(Error::Config(format!(
                "feature extractor with {depth} stages needs a resolution divisible by {f}"
            )));
        }
        FeatureExtractor::new(&self.loss.extractor)?;
        self.meta.meta.validate()?;
        if self.meta.pretrain.lr <= 0.0 || !self.meta.pretrain.lr.is_finite() {
            return Err(Error::Config("pretraining learning rate must be positive".into()));
        }
        if self.eval.shots.is_empty() || self.eval.shots.iter().any(|&k| k < 2) {
            return Err(Error::Config(format!("shots must all be at least 2, got {:?}", self.eval.shots)));
        }
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(Error::Config(format!("run name {:?} is not a plain file name", self.name)));
        }
        Ok(())
    }

    /// Derives every seed in the configuration from one value.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.data.dataset.seed = seed;
        self.model.seed = mix_seed(seed, &[101]);
        self.loss.discriminator.seed = mix_seed(seed, &[102]);
        self.meta.pretrain.seed = mix_seed(seed, &[103]);
        self.meta.meta.seed = mix_seed(seed, &[104]);
        self.eval.episode_seed = mix_seed(seed, &[105]);
        self
    }

    pub fn data_dir(&self) -> PathBuf {
        self.data.root.clone().unwrap_or_else(|| self.out_dir.join("data"))
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.data_dir().join("manifest.json")
    }

    pub fn load_dataset(&self) -> Result<Dataset> {
        let path = self.manifest_path();
        if !path.exists() {
            return Err(Error::Config(format!(
                "no dataset manifest at {}; run gen-data or import-poses first",
                path.display()
            )));
        }
        let ds = Dataset::load(&path)?;
        if ds.resolution != self.model.resolution {
            return Err(Error::Config(format!(
                "dataset resolution {:?} differs from model resolution {:?}",
                ds.resolution, self.model.resolution
            )));
        }
        Ok(ds)
    }

    /// Loss weights usable on `dataset`: without ground-truth flows the
    /// temporal term is switched off.
    pub fn effective_weights(&self, dataset: &Dataset) -> LossWeights {
        if dataset.has_flows() || self.loss.weights.temporal == 0.0 {
            self.loss.weights
        } else {
            warn!("dataset has no flows: temporal loss weight forced to 0");
            LossWeights {
                temporal: 0.0,
                ..self.loss.weights
            }
        }
    }
}

/// Training and adaptation recipes compared in the experiments.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Meta-trained on moves with the temporal loss, adapted on moves.
    MetaDance,
    /// As `MetaDance` with the temporal weight at 0 throughout.
    TdFree,
    /// Meta-trained and adapted on independent frames.
    MetaFrame,
    /// First-order Reptile meta-training, adapted on moves.
    Reptile,
    /// Pretrained only, adapted on moves.
    PreMove,
    /// Pretrained only, adapted on independent frames.
    PreFrame,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::MetaDance,
        Variant::TdFree,
        Variant::MetaFrame,
        Variant::Reptile,
        Variant::PreMove,
        Variant::PreFrame,
    ];
    /// Rows of the frame-usage ablation table.
    pub const ABLATION: [Variant; 5] = [
        Variant::PreFrame,
        Variant::MetaFrame,
        Variant::PreMove,
        Variant::TdFree,
        Variant::MetaDance,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::MetaDance => "metadance",
            Variant::TdFree => "td_free",
            Variant::MetaFrame => "meta_frame",
            Variant::Reptile => "reptile",
            Variant::PreMove => "pre_move",
            Variant::PreFrame => "pre_frame",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Variant::MetaDance => "MetaDance",
            Variant::TdFree => "TD-free",
            Variant::MetaFrame => "MetaFrame",
            Variant::Reptile => "Reptile",
            Variant::PreMove => "PreMove",
            Variant::PreFrame => "PreFrame",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        let key = s.to_ascii_lowercase().replace('-', "_");
        let key = if key == "pre_pix" || key == "prepix" { "pre_frame".to_string() } else { key };
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == key || v.name().replace('_', "") == key)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown variant {s:?}; expected one of {}",
                    Variant::ALL.map(|v| v.name()).join(", ")
                ))
            })
    }

    pub fn meta_trained(self) -> bool {
        !matches!(self, Variant::PreMove | Variant::PreFrame)
    }

    pub fn adapt_variant(self) -> AdaptVariant {
        match self {
            Variant::MetaDance | Variant::Reptile | Variant::PreMove => AdaptVariant::Move,
            Variant::TdFree => AdaptVariant::TdFree,
            Variant::MetaFrame | Variant::PreFrame => AdaptVariant::Frame,
        }
    }

    pub fn train_mode(self) -> SynthMode {
        self.adapt_variant().mode()
    }

    pub fn train_weights(self, w: LossWeights) -> LossWeights {
        self.adapt_variant().weights(w)
    }

    pub fn algorithm(self) -> Algorithm {
        match self {
            Variant::Reptile => Algorithm::Reptile,
            _ => Algorithm::Maml,
        }
    }
}

/// A variant, optionally meta-trained with a fixed number of moves per
/// support and query sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunSpec {
    pub variant: Variant,
    pub moves: Option<usize>,
}

impl RunSpec {
    pub fn new(variant: Variant) -> Self {
        Self { variant, moves: None }
    }

    pub fn with_moves(variant: Variant, moves: usize) -> Self {
        Self {
            variant,
            moves: Some(moves),
        }
    }

    /// File stem of the run's checkpoint and curve.
    pub fn stem(&self) -> String {
        match (self.variant.meta_trained(), self.moves) {
            (false, _) => "pretrain".into(),
            (true, None) => self.variant.name().into(),
            (true, Some(m)) => format!("{}_m{m}", self.variant.name()),
        }
    }

    /// File stem of the run's evaluation reports and strips.
    pub fn report_stem(&self) -> String {
        match self.moves {
            Some(m) if self.variant.meta_trained() => format!("{}_m{m}", self.variant.name()),
            _ => self.variant.name().into(),
        }
    }

    /// Shot count whose support holds exactly `moves` disjoint moves.
    pub fn shots(&self, default: usize) -> usize {
        self.moves.map_or(default, |m| 2 * m + 1)
    }

    pub fn label(&self) -> String {
        match self.moves {
            None => self.variant.label().into(),
            Some(m) => format!("{} ({m} moves)", self.variant.label()),
        }
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Fully resolved configuration of one run plus the run's own settings.
fn run_echo(cfg: &ExperimentConfig, stage: &str, spec: Option<RunSpec>, weights: LossWeights, shots: usize) -> serde_json::Value {
    let mut resolved = cfg.clone();
    resolved.loss.weights = weights;
    resolved.data.sampler.shots = shots;
    if let Some(s) = spec {
        resolved.meta.meta.algorithm = s.variant.algorithm();
        resolved.eval.adapt.variant = s.variant.adapt_variant();
    }
    let mut v = serde_json::to_value(&resolved).expect("config serializes");
    v["run"] = json!({
        "stage": stage,
        "variant": spec.map(|s| s.variant),
        "moves": spec.and_then(|s| s.moves),
        "temporal_weight": weights.temporal,
    });
    v
}

fn write_echo(path: &Path, echo: &serde_json::Value) -> Result<()> {
    write_atomic(path, serde_json::to_string_pretty(echo)?.as_bytes())
}

pub fn pretrain_checkpoint(cfg: &ExperimentConfig) -> PathBuf {
    cfg.out_dir.join("pretrain.ckpt")
}

pub fn run_checkpoint(cfg: &ExperimentConfig, spec: RunSpec) -> PathBuf {
    cfg.out_dir.join(format!("{}.ckpt", spec.stem()))
}

/// Pretrains from scratch, or resumes from an existing pretraining checkpoint.
pub fn run_pretrain(cfg: &ExperimentConfig, dataset: &Dataset, stop: Option<&AtomicBool>) -> Result<TrainState> {
    cfg.validate()?;
    ensure_dir(&cfg.out_dir)?;
    let weights = cfg.effective_weights(dataset);
    let echo = run_echo(cfg, "pretrain", None, weights, cfg.data.sampler.shots);
    write_echo(&cfg.out_dir.join("pretrain_config.json"), &echo)?;
    let files = RunFiles::new(&cfg.out_dir, "pretrain");
    let state = if files.checkpoint.exists() {
        info!("resuming pretraining from {}", files.checkpoint.display());
        TrainState::load(&files.checkpoint)?.0
    } else {
        TrainState::new(
            init_params(&cfg.model)?,
            init_discriminator(&cfg.loss.discriminator, cfg.model.resolution)?,
            OptimizerKind::Adam,
        )
    };
    let extractor = FeatureExtractor::new(&cfg.loss.extractor)?;
    let ctx = TrainContext {
        dataset,
        model: &cfg.model,
        extractor: &extractor,
        weights,
        mode: SynthMode::Move,
    };
    pretrain(state, &ctx, &cfg.meta.pretrain, Some(&files), &echo, stop)
}

/// Meta-trains one variant starting from `init` (the pretraining checkpoint
/// by default), or resumes the variant's own checkpoint when present.
pub fn run_meta_train(
    cfg: &ExperimentConfig,
    dataset: &Dataset,
    spec: RunSpec,
    init: Option<&Path>,
    stop: Option<&AtomicBool>,
) -> Result<TrainState> {
    cfg.validate()?;
    if !spec.variant.meta_trained() {
        return Err(Error::Config(format!(
            "variant {} is not meta-trained; it uses the pretraining checkpoint",
            spec.variant.name()
        )));
    }
    ensure_dir(&cfg.out_dir)?;
    let weights = spec.variant.train_weights(cfg.effective_weights(dataset));
    let shots = spec.shots(cfg.data.sampler.shots);
    let sampler = cfg.data.sampler.with_shots(shots);
    let meta_cfg = MetaConfig {
        algorithm: spec.variant.algorithm(),
        ..cfg.meta.meta.clone()
    };
    let stem = spec.stem();
    let echo = run_echo(cfg, "meta_train", Some(spec), weights, shots);
    write_echo(&cfg.out_dir.join(format!("{stem}_config.json")), &echo)?;
    info!("{stem}: temporal weight {}", weights.temporal);
    let files = RunFiles::new(&cfg.out_dir, &stem);
    let state = if files.checkpoint.exists() {
        info!("resuming {stem} from {}", files.checkpoint.display());
        TrainState::load(&files.checkpoint)?.0
    } else {
        let init = init.map(Path::to_path_buf).unwrap_or_else(|| pretrain_checkpoint(cfg));
        TrainState::load(&init)?.0.restart(meta_cfg.optimizer)
    };
    let extractor = FeatureExtractor::new(&cfg.loss.extractor)?;
    let ctx = TrainContext {
        dataset,
        model: &cfg.model,
        extractor: &extractor,
        weights,
        mode: spec.variant.train_mode(),
    };
    meta_train(state, &ctx, &sampler, &meta_cfg, Some(&files), &echo, stop)
}

#[derive(Clone, Debug, Default)]
pub struct MetaTestOptions {
    /// Overrides the configured shot counts.
    pub shots: Option<Vec<usize>>,
    /// Replays episodes from a file instead of sampling them.
    pub episodes_file: Option<PathBuf>,
    pub workers: Option<usize>,
    /// Overrides the variant's checkpoint.
    pub checkpoint: Option<PathBuf>,
    /// Overrides the configured adaptation (its variant is still taken from
    /// the run).
    pub adapt: Option<AdaptConfig>,
    /// Skips writing reports, episode files and strips.
    pub dry: bool,
    /// Distinguishes report files of the same run, e.g. `unadapted`.
    pub tag: Option<String>,
}

#[derive(Clone, Debug)]
pub struct MetaTestResult {
    pub records: Vec<MetricsRecord>,
    pub summary: Summary,
}

fn group_by_shots(episodes: Vec<Episode>) -> Vec<(usize, Vec<Episode>)> {
    let mut groups: Vec<(usize, Vec<Episode>)> = Vec::new();
    for e in episodes {
        let k = e.task.shots();
        match groups.iter_mut().find(|(s, _)| *s == k) {
            Some((_, g)) => g.push(e),
            None => groups.push((k, vec![e])),
        }
    }
    groups.sort_by_key(|(k, _)| *k);
    groups
}

/// Episodes of the configured protocol for one shot count.
pub fn protocol_episodes(cfg: &ExperimentConfig, dataset: &Dataset, shots: usize) -> Result<Vec<Episode>> {
    build_episodes(dataset, &cfg.data.sampler.with_shots(shots), cfg.eval.episode_seed)
}

/// Adapts the run's parameters on every episode's support, synthesizes the
/// query and scores it; one summary block per shot count.
pub fn run_meta_test(
    cfg: &ExperimentConfig,
    dataset: &Dataset,
    spec: RunSpec,
    opts: &MetaTestOptions,
) -> Result<MetaTestResult> {
    cfg.validate()?;
    let checkpoint = opts.checkpoint.clone().unwrap_or_else(|| run_checkpoint(cfg, spec));
    let (state, _) = TrainState::load(&checkpoint)?;
    let weights = cfg.effective_weights(dataset);
    let adapt = AdaptConfig {
        variant: spec.variant.adapt_variant(),
        ..opts.adapt.unwrap_or(cfg.eval.adapt)
    };
    let generator = GeneratorSpec {
        theta: state.theta.snapshot(),
        model: cfg.model.clone(),
        extractor: cfg.loss.extractor.clone(),
        discriminator: state.disc.snapshot(),
        weights,
        adapt,
    };
    let groups = match &opts.episodes_file {
        Some(path) => group_by_shots(load_episodes(path, dataset)?),
        None => {
            let shots = match (&opts.shots, spec.moves) {
                (Some(s), _) => s.clone(),
                (None, Some(_)) => vec![spec.shots(0)],
                (None, None) => cfg.eval.shots.clone(),
            };
            shots
                .iter()
                .map(|&k| Ok((k, protocol_episodes(cfg, dataset, k)?)))
                .collect::<Result<Vec<_>>>()?
        }
    };
    let stem = match &opts.tag {
        Some(t) => format!("{}_{t}", spec.report_stem()),
        None => spec.report_stem(),
    };
    let label = match spec.variant.meta_trained() {
        true => spec.label(),
        false => spec.variant.label().into(),
    };
    let extractor = FeatureExtractor::new(&cfg.loss.extractor)?;
    let workers = opts.workers.unwrap_or(cfg.eval.workers);
    let mut records = Vec::new();
    for (k, episodes) in &groups {
        info!("{label}: {} episodes at K={k}", episodes.len());
        let results = evaluate_episodes(&generator, episodes, workers)?;
        let fid = if cfg.eval.fid {
            let fake: Vec<Frame> = results.iter().flat_map(|(_, f)| f.iter().cloned()).collect();
            let real: Vec<Frame> = episodes.iter().flat_map(|e| e.task.query.frames.iter().cloned()).collect();
            Some(proxy_fid(&fake, &real, &extractor)?)
        } else {
            None
        };
        if !opts.dry {
            ensure_dir(&cfg.out_dir)?;
            if opts.episodes_file.is_none() {
                save_episodes(episodes, &cfg.out_dir.join(format!("episodes_K{k}.json")))?;
            }
            let strips = cfg.out_dir.join("strips");
            for ((rec, frames), ep) in results.iter().zip(episodes).take(cfg.eval.strip_episodes) {
                ensure_dir(&strips)?;
                let path = strips.join(format!("{stem}_K{k}_e{:03}.png", rec.episode_id));
                write_strip(&path, &ep.task.support.frames, frames, &ep.task.query.frames)?;
            }
        }
        records.extend(results.into_iter().map(|(r, _)| MetricsRecord { fid, ..r }));
    }
    let summary = aggregate(&records)?;
    if !opts.dry {
        write_reports(&cfg.out_dir, &format!("{stem}_test"), &records, &summary)?;
    }
    println!("{}", format_summary(&label, &summary));
    Ok(MetaTestResult { records, summary })
}

/// Three rows of frames: support, synthesized query, ground-truth query.
pub fn write_strip(path: &Path, support: &[Frame], generated: &[Frame], truth: &[Frame]) -> Result<()> {
    let first = generated
        .first()
        .or(truth.first())
        .ok_or_else(|| Error::Empty("strip needs frames".into()))?;
    let res = first.resolution();
    let cols = support.len().max(generated.len()).max(truth.len());
    let (w, h) = (res.width, res.height);
    let mut img = RgbImage::from_pixel((cols * w) as u32, (3 * h) as u32, image::Rgb([128, 128, 128]));
    for (row, frames) in [support, generated, truth].into_iter().enumerate() {
        for (col, f) in frames.iter().enumerate() {
            let px = f.pixels();
            let plane = res.pixels();
            for y in 0..h {
                for x in 0..w {
                    let i = y * w + x;
                    let c = |k: usize| (px[k * plane + i].clamp(0.0, 1.0) * 255.0).round() as u8;
                    img.put_pixel((col * w + x) as u32, (row * h + y) as u32, image::Rgb([c(0), c(1), c(2)]));
                }
            }
        }
    }
    img.save(path).map_err(|e| Error::format(path, e.to_string()))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationRow {
    pub run: String,
    pub summary: Summary,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationReport {
    pub variants: Vec<AblationRow>,
    pub moves: Vec<AblationRow>,
}

/// Runs the frame-usage variants at `shots` and the move-count grid, from
/// existing checkpoints only.
pub fn run_ablation(
    cfg: &ExperimentConfig,
    dataset: &Dataset,
    variants: &[Variant],
    shots: &[usize],
    move_grid: &[usize],
    workers: Option<usize>,
) -> Result<AblationReport> {
    let variant_specs: Vec<RunSpec> = variants.iter().map(|&v| RunSpec::new(v)).collect();
    let move_specs: Vec<RunSpec> = move_grid.iter().map(|&m| RunSpec::with_moves(Variant::MetaDance, m)).collect();
    for spec in variant_specs.iter().chain(&move_specs) {
        let path = run_checkpoint(cfg, *spec);
        if !path.exists() {
            return Err(Error::CheckpointNotFound(path));
        }
    }
    let opts = |shots: Vec<usize>| MetaTestOptions {
        shots: Some(shots),
        workers,
        ..Default::default()
    };
    let mut report = AblationReport {
        variants: Vec::new(),
        moves: Vec::new(),
    };
    for spec in variant_specs {
        let r = run_meta_test(cfg, dataset, spec, &opts(shots.to_vec()))?;
        report.variants.push(AblationRow {
            run: spec.variant.label().into(),
            summary: r.summary,
        });
    }
    for spec in move_specs {
        let k = spec.shots(cfg.data.sampler.shots);
        let r = run_meta_test(cfg, dataset, spec, &opts(vec![k]))?;
        report.moves.push(AblationRow {
            run: spec.moves.unwrap().to_string(),
            summary: r.summary,
        });
    }
    write_atomic(
        &cfg.out_dir.join("ablation.json"),
        serde_json::to_string_pretty(&report)?.as_bytes(),
    )?;
    write_atomic(&cfg.out_dir.join("ablation.csv"), ablation_csv(&report)?.as_bytes())?;
    Ok(report)
}

fn ablation_csv(report: &AblationReport) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["grid", "run", "K", "episodes", "mse", "psnr", "ssim", "fid", "twe"])?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for (grid, rows) in [("variant", &report.variants), ("moves", &report.moves)] {
        for row in rows {
            for s in &row.summary.rows {
                w.write_record([
                    grid.to_string(),
                    row.run.clone(),
                    s.shots.to_string(),
                    s.episodes.to_string(),
                    s.mse.to_string(),
                    s.psnr.to_string(),
                    s.ssim.to_string(),
                    opt(s.fid),
                    opt(s.twe),
                ])?;
            }
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::Csv(e.into_error().into()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Text tables of an ablation: one row per variant (mean over shots) and one
/// per move count.
pub fn format_ablation(report: &AblationReport) -> String {
    let mean = |s: &Summary, f: fn(&crate::metrics::ShotSummary) -> f64| {
        s.rows.iter().map(f).sum::<f64>() / s.rows.len() as f64
    };
    let cell = |v: Option<f64>| v.map(|x| format!("{x:.2}")).unwrap_or_else(|| "-".into());
    let mut out = format!(
        "{:<12}{:>11}{:>8}{:>8}{:>10}{:>10}\n",
        "Variant", "MSE", "PSNR", "SSIM", "FID", "TWE"
    );
    for row in &report.variants {
        let s = &row.summary;
        out += &format!(
            "{:<12}{:>11.2}{:>8.2}{:>8.3}{:>10}{:>10}\n",
            row.run,
            mean(s, |r| r.mse),
            mean(s, |r| r.psnr),
            mean(s, |r| r.ssim),
            s.mean_fid.map_or_else(|| "-".into(), |x| format!("{x:.2e}")),
            cell(s.mean_twe)
        );
    }
    out += &format!(
        "\n{:<12}{:>11}{:>8}{:>8}{:>10}{:>10}\n",
        "Moves", "MSE", "PSNR", "SSIM", "FID", "TWE"
    );
    for row in &report.moves {
        let s = &row.summary;
        out += &format!(
            "{:<12}{:>11.2}{:>8.2}{:>8.3}{:>10}{:>10}\n",
            row.run,
            mean(s, |r| r.mse),
            mean(s, |r| r.psnr),
            mean(s, |r| r.ssim),
            s.mean_fid.map_or_else(|| "-".into(), |x| format!("{x:.2e}")),
            cell(s.mean_twe)
        );
    }
    out
}

/// Collects every `*_test_summary.json` under `dir` into one text report.
pub fn collect_report(dir: &Path) -> Result<String> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.to_string_lossy().ends_with("_test_summary.json"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Empty(format!("no meta-test summaries in {}", dir.display())));
    }
    let mut out = String::new();
    for p in paths {
        let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        let summary: Summary = serde_json::from_str(&text).map_err(|e| Error::format(&p, e.to_string()))?;
        let name = p.file_name().unwrap().to_string_lossy().trim_end_matches("_test_summary.json").to_string();
        out += &format_summary(&name, &summary);
        out.push('\n');
    }
    Ok(out)
}
