//! Image and temporal quality metrics, episode evaluation and aggregation.
//!
//! All pixel metrics work in the 255 scale.

use std::collections::BTreeMap;
use std::path::Path;

use gradgraph::layers::warp;
use gradgraph::no_grad;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::{ExtractorConfig, FeatureExtractor, LossWeights};
use crate::meta::{adapt, AdaptConfig, TaskTensors};
use crate::model::{ModelConfig, Tdgn};
use crate::params::{ParamSet, ParamSnapshot};
use crate::sampling::Episode;
use crate::synth::write_atomic;
use crate::types::{FlowField, Frame, Task};

pub const PIXEL_MAX: f64 = 255.0;
pub const PSNR_CAP: f64 = 100.0;
const SSIM_RADIUS: usize = 5;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = (0.01 * PIXEL_MAX) * (0.01 * PIXEL_MAX);
const SSIM_C2: f64 = (0.03 * PIXEL_MAX) * (0.03 * PIXEL_MAX);

fn check_pair(pred: &[Frame], truth: &[Frame]) -> Result<()> {
    if pred.is_empty() {
        return Err(Error::Empty("metric needs at least one frame".into()));
    }
    if pred.len() != truth.len() {
        return Err(Error::Shape(format!(
            "{} predicted frames against {} ground-truth frames",
            pred.len(),
            truth.len()
        )));
    }
    for (i, (p, t)) in pred.iter().zip(truth).enumerate() {
        if p.resolution() != t.resolution() {
            return Err(Error::Shape(format!(
                "frame {i}: {:?} against {:?}",
                p.resolution(),
                t.resolution()
            )));
        }
    }
    Ok(())
}

fn frame_mse(a: &Frame, b: &Frame) -> f64 {
    let sum: f64 = a
        .pixels()
        .iter()
        .zip(b.pixels())
        .map(|(&x, &y)| {
            let d = (x as f64 - y as f64) * PIXEL_MAX;
            d * d
        })
        .sum();
    sum / a.pixels().len() as f64
}

/// Mean squared error per frame, averaged over frames.
pub fn mse(pred: &[Frame], truth: &[Frame]) -> Result<f64> {
    check_pair(pred, truth)?;
    Ok(pred.iter().zip(truth).map(|(p, t)| frame_mse(p, t)).sum::<f64>() / pred.len() as f64)
}

/// PSNR of one frame with the given MSE, capped at [`PSNR_CAP`].
pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP;
    }
    (10.0 * (PIXEL_MAX * PIXEL_MAX / mse).log10()).min(PSNR_CAP)
}

/// Per-frame PSNR, averaged over frames.
pub fn psnr(pred: &[Frame], truth: &[Frame]) -> Result<f64> {
    check_pair(pred, truth)?;
    Ok(pred
        .iter()
        .zip(truth)
        .map(|(p, t)| psnr_from_mse(frame_mse(p, t)))
        .sum::<f64>()
        / pred.len() as f64)
}

/// BT.601 luma in the 255 scale, row-major `[H, W]`.
pub fn luminance(frame: &Frame) -> Vec<f64> {
    let n = frame.resolution().pixels();
    let px = frame.pixels();
    (0..n)
        .map(|i| PIXEL_MAX * (0.299 * px[i] as f64 + 0.587 * px[n + i] as f64 + 0.114 * px[2 * n + i] as f64))
        .collect()
}

/// Unnormalized 1-D Gaussian taps for offsets `-5..=5`.
pub fn ssim_taps() -> [f64; 2 * SSIM_RADIUS + 1] {
    let mut k = [0.0; 2 * SSIM_RADIUS + 1];
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - SSIM_RADIUS as f64;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    k
}

/// Gaussian-weighted local mean. Taps outside the image are dropped and the
/// remaining weights renormalized, which keeps the window separable.
fn blur(img: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let r = SSIM_RADIUS as isize;
    let pass = |src: &[f64], len: usize, at: &dyn Fn(usize, usize) -> usize, lines: usize| {
        let mut out = vec![0.0; src.len()];
        for line in 0..lines {
            for i in 0..len {
                let (mut acc, mut norm) = (0.0, 0.0);
                for d in -r..=r {
                    let j = i as isize + d;
                    if j < 0 || j >= len as isize {
                        continue;
                    }
                    let k = taps[(d + r) as usize];
                    acc += k * src[at(line, j as usize)];
                    norm += k;
                }
                out[at(line, i)] = acc / norm;
            }
        }
        out
    };
    let rows = pass(img, w, &|y, x| y * w + x, h);
    pass(&rows, h, &|x, y| y * w + x, w)
}

fn frame_ssim(a: &Frame, b: &Frame) -> f64 {
    let res = a.resolution();
    let (h, w) = (res.height, res.width);
    let taps = ssim_taps();
    let x = luminance(a);
    let y = luminance(b);
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| u * v).collect::<Vec<_>>();
    let mx = blur(&x, h, w, &taps);
    let my = blur(&y, h, w, &taps);
    let mxx = blur(&prod(&x, &x), h, w, &taps);
    let myy = blur(&prod(&y, &y), h, w, &taps);
    let mxy = blur(&prod(&x, &y), h, w, &taps);
    let total: f64 = (0..h * w)
        .map(|i| {
            let vx = mxx[i] - mx[i] * mx[i];
            let vy = myy[i] - my[i] * my[i];
            let cxy = mxy[i] - mx[i] * my[i];
            ((2.0 * mx[i] * my[i] + SSIM_C1) * (2.0 * cxy + SSIM_C2))
                / ((mx[i] * mx[i] + my[i] * my[i] + SSIM_C1) * (vx + vy + SSIM_C2))
        })
        .sum();
    (total / (h * w) as f64).clamp(-1.0, 1.0)
}

/// Single-scale SSIM on luminance, mean over pixels and frames.
pub fn ssim(pred: &[Frame], truth: &[Frame]) -> Result<f64> {
    check_pair(pred, truth)?;
    Ok(pred.iter().zip(truth).map(|(p, t)| frame_ssim(p, t)).sum::<f64>() / pred.len() as f64)
}

/// Masked squared residual between frame `t + 1` and frame `t` warped by
/// `flows[t]`, averaged over adjacent pairs. Pairs whose mask is empty are
/// skipped; if every mask is empty the error is 0.
pub fn twe(pred: &[Frame], flows: &[FlowField]) -> Result<f64> {
    if pred.len() < 2 || flows.len() != pred.len() - 1 {
        return Err(Error::Shape(format!(
            "{} frames need {} flows, got {}",
            pred.len(),
            pred.len().saturating_sub(1),
            flows.len()
        )));
    }
    let res = pred[0].resolution();
    if let Some(i) = pred.iter().position(|f| f.resolution() != res) {
        return Err(Error::Shape(format!("frame {i} differs in size from frame 0")));
    }
    if let Some(i) = flows.iter().position(|f| f.resolution() != res) {
        return Err(Error::Shape(format!("flow {i} differs in size from the frames")));
    }
    let _guard = no_grad();
    let n = res.pixels();
    let (mut sum, mut pairs) = (0.0, 0usize);
    for (t, flow) in flows.iter().enumerate() {
        let mask = flow.mask();
        let valid: f64 = mask.iter().map(|&m| m as f64).sum();
        if valid == 0.0 {
            continue;
        }
        let warped = warp(&pred[t].to_tensor(), &flow.to_tensor());
        let wd = warped.data();
        let next = pred[t + 1].pixels();
        let mut err = 0.0;
        for (i, &m) in mask.iter().enumerate() {
            if m == 0.0 {
                continue;
            }
            for c in 0..3 {
                let d = (next[c * n + i] as f64 - wd[c * n + i]) * PIXEL_MAX;
                err += d * d;
            }
        }
        sum += err / valid;
        pairs += 1;
    }
    Ok(if pairs == 0 { 0.0 } else { sum / pairs as f64 })
}

fn sorted_samples(samples: &[Vec<f64>]) -> Vec<&Vec<f64>> {
    let mut s: Vec<&Vec<f64>> = samples.iter().collect();
    s.sort_by(|a, b| {
        a.iter()
            .zip(b.iter())
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    s
}

/// Mean and unbiased covariance. Samples are sorted first so the result does
/// not depend on their order.
fn moments(samples: &[Vec<f64>], dim: usize) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let sorted = sorted_samples(samples);
    let n = sorted.len() as f64;
    let mut mean = DVector::zeros(dim);
    for s in &sorted {
        mean += DVector::from_column_slice(s);
    }
    mean /= n;
    let mut cov = DMatrix::zeros(dim, dim);
    for s in &sorted {
        let d = DVector::from_column_slice(s) - &mean;
        cov += &d * d.transpose();
    }
    cov /= n - 1.0;
    if !cov.iter().all(|v| v.is_finite()) || !mean.iter().all(|v| v.is_finite()) {
        return Err(Error::DegenerateSet("feature moments are not finite".into()));
    }
    Ok((mean, cov))
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// Fréchet distance between Gaussians fitted to two feature sets.
///
/// The trace of `(S1 S2)^(1/2)` is taken as the trace of the symmetric
/// `(S1^(1/2) S2 S1^(1/2))^(1/2)`, which has the same eigenvalues.
pub fn frechet_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::DegenerateSet(format!(
            "need at least 2 samples per set, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let dim = a[0].len();
    if dim == 0 || a.iter().chain(b).any(|s| s.len() != dim) {
        return Err(Error::DegenerateSet("feature vectors differ in length".into()));
    }
    let (mu1, s1) = moments(a, dim)?;
    let (mu2, s2) = moments(b, dim)?;
    let r1 = sym_sqrt(&s1);
    let inner = &r1 * &s2 * &r1;
    let inner = (&inner + inner.transpose()) * 0.5;
    let cross: f64 = SymmetricEigen::new(inner)
        .eigenvalues
        .iter()
        .map(|v| v.max(0.0).sqrt())
        .sum();
    let d = (&mu1 - &mu2).norm_squared() + s1.trace() + s2.trace() - 2.0 * cross;
    if !d.is_finite() {
        return Err(Error::DegenerateSet("distance is not finite".into()));
    }
    Ok(d.max(0.0))
}

/// Fréchet distance on pooled deepest-stage features of the proxy extractor.
pub fn proxy_fid(pred_set: &[Frame], real_set: &[Frame], fx: &FeatureExtractor) -> Result<f64> {
    let _guard = no_grad();
    let feats = |set: &[Frame]| set.iter().map(|f| fx.pooled(&f.to_tensor())).collect::<Vec<_>>();
    frechet_distance(&feats(pred_set), &feats(real_set))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub episode_id: usize,
    pub person_id: String,
    #[serde(rename = "K")]
    pub shots: usize,
    pub mse: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub fid: Option<f64>,
    /// Absent when the data carries no ground-truth flows.
    pub twe: Option<f64>,
}

/// Produces the query frames of a task, adapting on its support first if it
/// wants to.
pub trait Generator {
    fn generate(&self, task: &Task) -> Result<Vec<Frame>>;
}

/// Scores generated query frames against the episode's ground truth.
pub fn score_episode(episode: &Episode, generated: &[Frame]) -> Result<MetricsRecord> {
    let truth = &episode.task.query.frames;
    let twe = match &episode.task.query.flows {
        Some(flows) => Some(twe(generated, flows)?),
        None => None,
    };
    Ok(MetricsRecord {
        episode_id: episode.episode_id,
        person_id: episode.task.person_id.clone(),
        shots: episode.task.shots(),
        mse: mse(generated, truth)?,
        psnr: psnr(generated, truth)?,
        ssim: ssim(generated, truth)?,
        fid: None,
        twe,
    })
}

/// Runs one episode and returns its record with the generated query frames.
pub fn run_episode(generator: &dyn Generator, episode: &Episode) -> Result<(MetricsRecord, Vec<Frame>)> {
    let frames = generator.generate(&episode.task)?;
    let record = score_episode(episode, &frames)?;
    Ok((record, frames))
}

/// Meta-trained generator: adapts on the support, then synthesizes the
/// query without tracking gradients.
#[derive(Clone, Debug)]
pub struct TdgnGenerator {
    pub theta: ParamSet,
    pub model: ModelConfig,
    pub extractor: FeatureExtractor,
    pub discriminator: ParamSet,
    pub weights: LossWeights,
    pub adapt: AdaptConfig,
}

impl Generator for TdgnGenerator {
    fn generate(&self, task: &Task) -> Result<Vec<Frame>> {
        let tensors = TaskTensors::of(task);
        let tuned = adapt(
            &self.theta,
            &self.model,
            &self.extractor,
            &self.discriminator,
            self.weights,
            &tensors,
            &self.adapt,
        )?;
        let _guard = no_grad();
        let net = Tdgn::new(&self.model, &tuned);
        let reference = net.reference(&tensors.ref_image, &tensors.ref_pose)?;
        let out = net.synthesize_sequence(&reference, &tensors.query.poses, self.adapt.variant.mode().options())?;
        out.iter().map(Frame::from_tensor).collect()
    }
}

/// Thread-safe description of a [`TdgnGenerator`]; each worker rebuilds its
/// own copy.
#[derive(Clone, Debug)]
pub struct GeneratorSpec {
    pub theta: ParamSnapshot,
    pub model: ModelConfig,
    pub extractor: ExtractorConfig,
    pub discriminator: ParamSnapshot,
    pub weights: LossWeights,
    pub adapt: AdaptConfig,
}

impl GeneratorSpec {
    pub fn build(&self) -> Result<TdgnGenerator> {
        Ok(TdgnGenerator {
            theta: self.theta.restore(),
            model: self.model.clone(),
            extractor: FeatureExtractor::new(&self.extractor)?,
            discriminator: self.discriminator.restore(),
            weights: self.weights,
            adapt: self.adapt,
        })
    }
}

/// Evaluates episodes on `workers` threads. Results come back in episode
/// order and do not depend on the worker count.
pub fn evaluate_episodes(
    spec: &GeneratorSpec,
    episodes: &[Episode],
    workers: usize,
) -> Result<Vec<(MetricsRecord, Vec<Frame>)>> {
    let workers = workers.clamp(1, episodes.len().max(1));
    if workers == 1 {
        let generator = spec.build()?;
        return episodes.iter().map(|e| run_episode(&generator, e)).collect();
    }
    let chunks: Vec<Result<Vec<(usize, (MetricsRecord, Vec<Frame>))>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                scope.spawn(move || {
                    let generator = spec.build()?;
                    episodes
                        .iter()
                        .enumerate()
                        .skip(w)
                        .step_by(workers)
                        .map(|(i, e)| Ok((i, run_episode(&generator, e)?)))
                        .collect()
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("evaluation worker panicked"))
            .collect()
    });
    let mut all = Vec::with_capacity(episodes.len());
    for chunk in chunks {
        all.extend(chunk?);
    }
    all.sort_by_key(|(i, _)| *i);
    Ok(all.into_iter().map(|(_, r)| r).collect())
}

/// Order-independent mean: values are sorted before summation.
fn mean_of(values: impl IntoIterator<Item = f64>) -> Option<f64> {
    let mut v: Vec<f64> = values.into_iter().collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    Some(v.iter().sum::<f64>() / v.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShotSummary {
    #[serde(rename = "K")]
    pub shots: usize,
    pub episodes: usize,
    pub mse: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub fid: Option<f64>,
    pub twe: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    /// One row per shot count, ascending.
    pub rows: Vec<ShotSummary>,
    /// Mean over the per-shot rows.
    pub mean_fid: Option<f64>,
    pub mean_twe: Option<f64>,
}

/// Per-shot means of every metric plus cross-shot means of FID and TWE.
pub fn aggregate(records: &[MetricsRecord]) -> Result<Summary> {
    if records.is_empty() {
        return Err(Error::Empty("no records to aggregate".into()));
    }
    let mut groups: BTreeMap<usize, Vec<&MetricsRecord>> = BTreeMap::new();
    for r in records {
        groups.entry(r.shots).or_default().push(r);
    }
    let rows: Vec<ShotSummary> = groups
        .into_iter()
        .map(|(shots, rs)| ShotSummary {
            shots,
            episodes: rs.len(),
            mse: mean_of(rs.iter().map(|r| r.mse)).unwrap(),
            psnr: mean_of(rs.iter().map(|r| r.psnr)).unwrap(),
            ssim: mean_of(rs.iter().map(|r| r.ssim)).unwrap(),
            fid: mean_of(rs.iter().filter_map(|r| r.fid)),
            twe: mean_of(rs.iter().filter_map(|r| r.twe)),
        })
        .collect();
    Ok(Summary {
        mean_fid: mean_of(rows.iter().filter_map(|r| r.fid)),
        mean_twe: mean_of(rows.iter().filter_map(|r| r.twe)),
        rows,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn records_csv(records: &[MetricsRecord]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["episode_id", "person_id", "K", "mse", "psnr", "ssim", "fid", "twe"])?;
    for r in records {
        w.write_record([
            r.episode_id.to_string(),
            r.person_id.clone(),
            r.shots.to_string(),
            r.mse.to_string(),
            r.psnr.to_string(),
            r.ssim.to_string(),
            opt(r.fid),
            opt(r.twe),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Csv(e.into_error().into()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn read_records_csv(path: &Path) -> Result<Vec<MetricsRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

pub fn summary_csv(summary: &Summary) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["K", "episodes", "mse", "psnr", "ssim", "fid", "twe"])?;
    for r in &summary.rows {
        w.write_record([
            r.shots.to_string(),
            r.episodes.to_string(),
            r.mse.to_string(),
            r.psnr.to_string(),
            r.ssim.to_string(),
            opt(r.fid),
            opt(r.twe),
        ])?;
    }
    let total: usize = summary.rows.iter().map(|r| r.episodes).sum();
    w.write_record([
        "mean".to_string(),
        total.to_string(),
        String::new(),
        String::new(),
        String::new(),
        opt(summary.mean_fid),
        opt(summary.mean_twe),
    ])?;
    let bytes = w.into_inner().map_err(|e| Error::Csv(e.into_error().into()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Writes `<stem>_episodes.csv`, `<stem>_summary.csv` and `<stem>_summary.json`.
pub fn write_reports(dir: &Path, stem: &str, records: &[MetricsRecord], summary: &Summary) -> Result<()> {
    write_atomic(&dir.join(format!("{stem}_episodes.csv")), records_csv(records)?.as_bytes())?;
    write_atomic(&dir.join(format!("{stem}_summary.csv")), summary_csv(summary)?.as_bytes())?;
    write_atomic(
        &dir.join(format!("{stem}_summary.json")),
        serde_json::to_string_pretty(summary)?.as_bytes(),
    )
}

fn cell(v: Option<f64>, digits: usize) -> String {
    v.map(|x| format!("{x:.digits$}")).unwrap_or_else(|| "-".into())
}

/// Fixed-width text table with one block per shot count.
/// Proxy FID values span many orders of magnitude.
fn sci(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.2e}"))
}

pub fn format_summary(title: &str, summary: &Summary) -> String {
    let mut s = format!("{title}\n{:<8}{:>6}{:>11}{:>8}{:>8}{:>10}{:>10}\n", "shots", "eps", "MSE", "PSNR", "SSIM", "FID", "TWE");
    for r in &summary.rows {
        s += &format!(
            "{:<8}{:>6}{:>11.2}{:>8.2}{:>8.3}{:>10}{:>10}\n",
            format!("Shot-{}", r.shots),
            r.episodes,
            r.mse,
            r.psnr,
            r.ssim,
            sci(r.fid),
            cell(r.twe, 2)
        );
    }
    s += &format!(
        "{:<8}{:>6}{:>11}{:>8}{:>8}{:>10}{:>10}\n",
        "Mean",
        "",
        "",
        "",
        "",
        sci(summary.mean_fid),
        cell(summary.mean_twe, 2)
    );
    s
}
