//! Dataset benchmark: whole-image reconstruction over every image of a
//! directory, per sampling ratio and multiplier, written as CSV and JSON.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::network::{Mode, Network, PathTrace, Variant};
use crate::selector::ModulationInput;
use crate::sensing::{initialize, sample, BlockLayout, MeasurementMatrix, BLOCK_SIZE};
use crate::training::data::load_image_dir;

use super::metrics::{psnr, ssim};

/// Label of the aggregate row closing every group.
pub const AGGREGATE_LABEL: &str = "mean";

/// File name of the checkpoint trained for `ratio`, e.g. `ratio_30.safetensors`.
pub fn checkpoint_file_name(ratio: f64) -> String {
    format!("ratio_{}.safetensors", ratio_label(ratio))
}

/// Ratio as a percentage without trailing zeros: `0.3 → "30"`, `0.015 → "1.5"`.
pub fn ratio_label(ratio: f64) -> String {
    let pct = (ratio * 100.0 * 1e6).round() / 1e6;
    format!("{pct}")
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchmarkOptions {
    /// A checkpoint file, or a directory holding one file per ratio.
    pub checkpoint: PathBuf,
    /// Directory of test images; its name labels the dataset.
    pub dataset: PathBuf,
    /// Ratios to evaluate. Empty means the ratio of the given checkpoint file.
    pub ratios: Vec<f64>,
    /// Multipliers to evaluate. Empty means every multiplier the model was
    /// trained with. Ignored for models without μ control.
    pub mu_values: Vec<f64>,
    /// Overlap stride; defaults to the checkpoint's evaluation stride.
    pub stride: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub dataset: String,
    pub image: String,
    pub ratio: f64,
    pub mu: Option<f64>,
    pub psnr_db: f64,
    pub ssim: f64,
    pub n_am_g: f64,
    pub n_am_p: f64,
    pub dynamic_gflops: f64,
    pub static_gflops: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AbsentCheckpoint {
    pub ratio: f64,
    pub path: PathBuf,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    /// Per-image rows, each group closed by its aggregate row.
    pub rows: Vec<ResultRow>,
    pub absent: Vec<AbsentCheckpoint>,
}

/// Scores of one reconstructed image.
#[derive(Clone, Debug)]
pub struct ImageScore {
    pub reconstruction: Array2<f64>,
    pub initial_psnr_db: f64,
    pub psnr_db: f64,
    pub ssim: f64,
    pub trace: PathTrace,
}

/// Samples `image` with overlapping blocks, reconstructs it and scores it.
pub fn evaluate_image(
    network: &Network,
    phi: &MeasurementMatrix,
    image: &Array2<f64>,
    modulation: &ModulationInput,
    stride: usize,
) -> Result<ImageScore> {
    let (h, w) = image.dim();
    let layout = BlockLayout::new(h, w, BLOCK_SIZE, stride)?;
    let meas = sample(image.view(), phi, &layout)?;
    let x0 = initialize(&meas, phi)?;
    let (reconstruction, trace) = network.recover(&meas, phi, modulation, Mode::Eval)?;
    let clipped = reconstruction.mapv(|v| v.clamp(0.0, 1.0));
    Ok(ImageScore {
        initial_psnr_db: psnr(image.view(), x0.view(), 1.0)?,
        psnr_db: psnr(image.view(), clipped.view(), 1.0)?,
        ssim: ssim(image.view(), clipped.view())?,
        reconstruction,
        trace,
    })
}

fn resolve_checkpoints(options: &BenchmarkOptions) -> Result<Vec<(f64, PathBuf)>> {
    if options.checkpoint.is_dir() {
        if options.ratios.is_empty() {
            return Err(Error::Config(
                "ratios are required when the checkpoint path is a directory".into(),
            ));
        }
        return Ok(options
            .ratios
            .iter()
            .map(|&r| (r, options.checkpoint.join(checkpoint_file_name(r))))
            .collect());
    }
    if options.ratios.is_empty() {
        let ckpt = Checkpoint::load(&options.checkpoint)?;
        return Ok(vec![(ckpt.meta.ratio, options.checkpoint.clone())]);
    }
    // a single file serves its own ratio; the other ratios look for siblings
    let own = Checkpoint::load(&options.checkpoint).ok().map(|c| c.meta.ratio);
    let dir = options.checkpoint.parent().unwrap_or(Path::new("."));
    Ok(options
        .ratios
        .iter()
        .map(|&r| match own {
            Some(o) if (o - r).abs() < 1e-9 => (r, options.checkpoint.clone()),
            _ => (r, dir.join(checkpoint_file_name(r))),
        })
        .collect())
}

fn mean(rows: &[ResultRow], f: impl Fn(&ResultRow) -> f64) -> f64 {
    rows.iter().map(f).sum::<f64>() / rows.len() as f64
}

fn aggregate(rows: &[ResultRow]) -> ResultRow {
    let first = &rows[0];
    ResultRow {
        dataset: first.dataset.clone(),
        image: AGGREGATE_LABEL.into(),
        ratio: first.ratio,
        mu: first.mu,
        psnr_db: mean(rows, |r| r.psnr_db),
        ssim: mean(rows, |r| r.ssim),
        n_am_g: mean(rows, |r| r.n_am_g),
        n_am_p: mean(rows, |r| r.n_am_p),
        dynamic_gflops: mean(rows, |r| r.dynamic_gflops),
        static_gflops: mean(rows, |r| r.static_gflops),
    }
}

/// Scores every image in parallel across the available cores; the row order
/// follows the image order.
fn score_all(
    network: &Network,
    phi: &MeasurementMatrix,
    images: &[(String, Array2<f64>)],
    modulation: &ModulationInput,
    stride: usize,
) -> Result<Vec<(String, ImageScore)>> {
    let workers = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
        .min(images.len())
        .max(1);
    let chunk = images.len().div_ceil(workers).max(1);
    let results: Vec<Result<Vec<(String, ImageScore)>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = images
            .chunks(chunk)
            .map(|part| {
                scope.spawn(move || {
                    part.iter()
                        .map(|(name, img)| {
                            evaluate_image(network, phi, img, modulation, stride)
                                .map(|s| (name.clone(), s))
                        })
                        .collect::<Result<Vec<_>>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("evaluation worker panicked"))
            .collect()
    });
    let mut out = Vec::with_capacity(images.len());
    for part in results {
        out.extend(part?);
    }
    Ok(out)
}

/// Evaluates every (ratio, μ) combination on the dataset. Missing
/// checkpoints are recorded in [`BenchmarkReport::absent`].
pub fn run_benchmark(options: &BenchmarkOptions) -> Result<BenchmarkReport> {
    let images = load_image_dir(&options.dataset)?;
    if images.is_empty() {
        return Err(Error::Config(format!(
            "no decodable images in {}",
            options.dataset.display()
        )));
    }
    let dataset = options
        .dataset
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| options.dataset.display().to_string());
    let mut report = BenchmarkReport::default();
    for (ratio, path) in resolve_checkpoints(options)? {
        if !path.is_file() {
            log::warn!("no checkpoint for ratio {ratio} at {}", path.display());
            report.absent.push(AbsentCheckpoint { ratio, path });
            continue;
        }
        let ckpt = Checkpoint::load(&path)?;
        let phi = ckpt.meta.phi()?;
        let stride = options.stride.unwrap_or(ckpt.meta.eval_stride);
        let settings: Vec<(Option<f64>, ModulationInput)> = match ckpt.meta.variant {
            Variant::DpDun => vec![(None, ModulationInput::zeros(0))],
            Variant::DpcDun => {
                let mus = if options.mu_values.is_empty() {
                    ckpt.meta.mu_set.clone()
                } else {
                    options.mu_values.clone()
                };
                mus.into_iter()
                    .map(|mu| Ok((Some(mu), ModulationInput::preset_in(mu, &ckpt.meta.mu_set)?)))
                    .collect::<Result<_>>()?
            }
        };
        for (mu, modulation) in settings {
            let scores = score_all(&ckpt.network, &phi, &images, &modulation, stride)?;
            let rows: Vec<ResultRow> = scores
                .into_iter()
                .map(|(image, s)| ResultRow {
                    dataset: dataset.clone(),
                    image,
                    ratio: ckpt.meta.ratio,
                    mu,
                    psnr_db: s.psnr_db,
                    ssim: s.ssim,
                    n_am_g: s.trace.n_am_g as f64,
                    n_am_p: s.trace.n_am_p as f64,
                    dynamic_gflops: s.trace.dynamic_flops / 1e9,
                    static_gflops: s.trace.static_flops / 1e9,
                })
                .collect();
            let agg = aggregate(&rows);
            report.rows.extend(rows);
            report.rows.push(agg);
        }
    }
    Ok(report)
}

impl BenchmarkReport {
    pub fn aggregates(&self) -> impl Iterator<Item = &ResultRow> {
        self.rows.iter().filter(|r| r.image == AGGREGATE_LABEL)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in &self.rows {
            w.serialize(row)
                .map_err(|e| Error::State(format!("csv encoding: {e}")))?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| Error::State(format!("csv encoding: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }

    /// Writes `results.csv` and `results.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<(PathBuf, PathBuf)> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv_path = dir.join("results.csv");
        let json_path = dir.join("results.json");
        fs::write(&csv_path, self.to_csv()?).map_err(|e| Error::io(&csv_path, e))?;
        fs::write(&json_path, self.to_json()).map_err(|e| Error::io(&json_path, e))?;
        Ok((csv_path, json_path))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checkpoint::CheckpointMeta;
    use crate::imaging::save_png;
    use crate::network::NetworkConfig;
    use ndarray::Array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn write_dataset(dir: &Path, n: usize) {
        for k in 0..n {
            let img = Array::from_shape_fn((40, 36), |(i, j)| ((i * (k + 2) + j * 3) % 17) as f64 / 16.0);
            save_png(&img, &dir.join(format!("img{k}.png"))).unwrap();
        }
    }

    fn write_checkpoint(path: &Path, ratio: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = NetworkConfig {
            stages: 2,
            channels: 8,
            ..NetworkConfig::default()
        };
        let net = Network::new(cfg, &mut rng).unwrap();
        let meta = CheckpointMeta::for_network(&net, ratio, &crate::selector::MU_PRESETS, 0);
        Checkpoint { meta, network: net }.save(path).unwrap();
    }

    #[test]
    fn ratio_labels() {
        assert_eq!(checkpoint_file_name(0.3), "ratio_30.safetensors");
        assert_eq!(checkpoint_file_name(0.1), "ratio_10.safetensors");
        assert_eq!(ratio_label(0.015), "1.5");
    }

    #[test]
    fn three_images_give_four_rows() {
        let tmp = tempfile::tempdir().unwrap();
        let data = tmp.path().join("toy");
        fs::create_dir(&data).unwrap();
        write_dataset(&data, 3);
        let ckpt = tmp.path().join(checkpoint_file_name(0.25));
        write_checkpoint(&ckpt, 0.25);
        let report = run_benchmark(&BenchmarkOptions {
            checkpoint: ckpt,
            dataset: data,
            ratios: vec![0.25, 0.5],
            mu_values: vec![0.0005],
            stride: None,
        })
        .unwrap();
        assert_eq!(report.rows.len(), 4);
        assert_eq!(report.rows[3].image, AGGREGATE_LABEL);
        assert_eq!(report.absent.len(), 1);
        assert_eq!(report.absent[0].ratio, 0.5);
        let agg = &report.rows[3];
        let mean_psnr = report.rows[..3].iter().map(|r| r.psnr_db).sum::<f64>() / 3.0;
        assert!((agg.psnr_db - mean_psnr).abs() < 1e-9);
        let csv = report.to_csv().unwrap();
        assert!(csv.starts_with(
            "dataset,image,ratio,mu,psnr_db,ssim,n_am_g,n_am_p,dynamic_gflops,static_gflops"
        ));
        assert_eq!(csv.lines().count(), 5);
        let back: BenchmarkReport = serde_json::from_str(&report.to_json()).unwrap();
        assert_eq!(back, report);
    }
}
