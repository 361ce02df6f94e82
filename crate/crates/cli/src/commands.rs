//! Subcommand implementations. Each takes resolved [`Settings`] and leaves
//! its artifacts under `--out` (or `--data-root` for `gen-data`).

use crate::settings::{Backbone, Settings};
use cpa_core::attention::affinity_row_to_gray;
use cpa_core::infer;
use cpa_core::layers::Phase;
use cpa_core::model::{SegModel, Variant};
use cpa_core::raster::{self, GrayRaster, RgbRaster};
use cpa_core::scene::{self, Sample, SceneConfig};
use cpa_core::training::{self, AblationConfig, TrainConfig};
use cpa_core::{checkpoint, fdsuite, rng};
use cpa_core::{Graph, PipelineError, Shape, Tensor};
use std::path::{Path, PathBuf};

const SCENES_PER_REGION: usize = 36;
const BENCH_EXTENT: usize = 5000;

fn ensure_dir(dir: &Path) -> Result<(), PipelineError> {
    std::fs::create_dir_all(dir).map_err(|e| PipelineError::io(dir.display().to_string(), e))
}

fn write_text(path: &Path, text: &str) -> Result<(), PipelineError> {
    std::fs::write(path, text).map_err(|e| PipelineError::io(path.display().to_string(), e))
}

fn checkpoint_path(s: &Settings) -> PathBuf {
    s.out.join("model.ckpt")
}

/// All scenes under `root`, scanned per region until the first missing index.
fn load_dataset(root: &Path) -> Result<Vec<Sample>, PipelineError> {
    let config = SceneConfig::default();
    let mut samples = Vec::new();
    for region in config.region_names() {
        for index in 1.. {
            let (image, _) = scene::scene_paths(root, &region, index);
            if !image.exists() {
                break;
            }
            samples.push(scene::read_sample(root, &region, index)?);
        }
    }
    if samples.is_empty() {
        return Err(PipelineError::Invalid(format!(
            "no scenes under {}; run gen-data first",
            root.display()
        )));
    }
    Ok(samples)
}

fn split(samples: Vec<Sample>) -> (Vec<Sample>, Vec<Sample>) {
    samples.into_iter().partition(|s| !scene::is_validation(s.index))
}

/// The input raster for `infer` / `attn-export`: `--data-root` must name a
/// `.ppm` file directly.
fn input_raster(s: &Settings) -> Result<RgbRaster, PipelineError> {
    if s.data_root.extension().and_then(|e| e.to_str()) != Some("ppm") {
        return Err(PipelineError::Invalid(format!(
            "expected --data-root to name a .ppm raster, got {}",
            s.data_root.display()
        )));
    }
    raster::read_ppm(&s.data_root)
}

fn load_weights(s: &Settings, model: &mut SegModel<f32>) -> Result<(), PipelineError> {
    let ckpt = checkpoint_path(s);
    if ckpt.exists() {
        let canon = model.config.canonical_string();
        checkpoint::load(&ckpt, model, &canon)?;
    } else {
        log::warn!(
            "no checkpoint at {}; proceeding with freshly initialized weights",
            ckpt.display()
        );
    }
    Ok(())
}

pub fn gen_data(s: &Settings) -> Result<(), PipelineError> {
    let config = SceneConfig::default();
    let written = scene::generate_dataset(&s.data_root, s.seed, SCENES_PER_REGION, &config)?;
    println!(
        "wrote {written} scenes ({} regions x {SCENES_PER_REGION}) under {}",
        config.region_names().len(),
        s.data_root.display()
    );
    println!("validation split: scene indices 1-5 of every region");
    Ok(())
}

pub fn train(s: &Settings) -> Result<(), PipelineError> {
    ensure_dir(&s.out)?;
    let (train_set, val_set) = split(load_dataset(&s.data_root)?);
    if train_set.is_empty() {
        return Err(PipelineError::Invalid("training split is empty".into()));
    }
    let min_extent = train_set
        .iter()
        .map(|t| t.image.h.min(t.image.w))
        .min()
        .unwrap();
    let cfg = TrainConfig {
        lr: 1e-3,
        epochs: s.epochs.unwrap_or(35),
        batch_size: s.batch.unwrap_or(4),
        crop: s.crop.unwrap_or_else(|| min_extent.min(500)),
        seed: s.seed,
        ..TrainConfig::default()
    };
    let mut model = SegModel::<f32>::new(s.model_config())?;
    println!(
        "training {} / {} backbone: {} train, {} val scenes; {} epochs, batch {}, crop {}, lr {}",
        s.variant,
        s.backbone,
        train_set.len(),
        val_set.len(),
        cfg.epochs,
        cfg.batch_size,
        cfg.crop,
        cfg.lr
    );
    let log = training::train(&mut model, &train_set, &val_set, &cfg)?;
    let mut curve = String::from("step,loss\n");
    for (i, loss) in log.step_losses.iter().enumerate() {
        curve.push_str(&format!("{},{:.6}\n", i + 1, loss));
    }
    write_text(&s.out.join("loss.csv"), &curve)?;
    let canon = model.config.canonical_string();
    checkpoint::save(&checkpoint_path(s), &mut model, &canon)?;
    println!("checkpoint: {}", checkpoint_path(s).display());
    if !val_set.is_empty() {
        let report = training::evaluate(&model, &val_set)?.report();
        print!("{report}");
        write_text(&s.out.join("metrics.txt"), &report)?;
    }
    Ok(())
}

pub fn eval(s: &Settings) -> Result<(), PipelineError> {
    ensure_dir(&s.out)?;
    let (_, val_set) = split(load_dataset(&s.data_root)?);
    if val_set.is_empty() {
        return Err(PipelineError::Invalid("validation split is empty".into()));
    }
    let ckpt = checkpoint_path(s);
    if !ckpt.exists() {
        return Err(PipelineError::Invalid(format!(
            "no checkpoint at {}; run train first",
            ckpt.display()
        )));
    }
    let mut model = SegModel::<f32>::new(s.model_config())?;
    let canon = model.config.canonical_string();
    checkpoint::load(&ckpt, &mut model, &canon)?;
    let report = training::evaluate(&model, &val_set)?.report();
    print!("{report}");
    write_text(&s.out.join("metrics.txt"), &report)
}

pub fn infer(s: &Settings) -> Result<(), PipelineError> {
    ensure_dir(&s.out)?;
    let image = input_raster(s)?;
    let mut model = SegModel::<f32>::new(s.model_config())?;
    load_weights(s, &mut model)?;
    let crop = s.crop.unwrap_or(500).min(image.h).min(image.w);
    let stride = s.stride.unwrap_or(crop);
    let (_, mask, stats) = infer::infer_tiled(&model, &image, crop, stride, s.threads)?;
    let stem = s
        .data_root
        .file_stem()
        .and_then(|v| v.to_str())
        .unwrap_or("image");
    let out_path = s.out.join(format!("{stem}_mask.pgm"));
    raster::write_mask_pgm(&out_path, &mask)?;
    println!(
        "stitched {} crops in {:.2}s ({:.3}s per crop): {}",
        stats.crops,
        stats.wall_seconds,
        stats.seconds_per_crop,
        out_path.display()
    );
    Ok(())
}

pub fn ablate(s: &Settings) -> Result<(), PipelineError> {
    ensure_dir(&s.out)?;
    let mut cfg = AblationConfig::default();
    if s.seed != 0 {
        cfg.dataset_seed = s.seed;
    }
    if let Some(epochs) = s.epochs {
        cfg.epochs = epochs;
    }
    if let Some(batch) = s.batch {
        cfg.batch_size = batch;
    }
    println!(
        "ablation: {} scenes/region, {} epochs, seeds {:?}",
        cfg.scenes_per_region, cfg.epochs, cfg.train_seeds
    );
    let rows = training::run_ablation(&cfg)?;
    let table = training::render_ablation(&rows);
    print!("{table}");
    write_text(&s.out.join("ablation.txt"), &table)
}

pub fn gradcheck(s: &Settings) -> Result<(), PipelineError> {
    const TOL: f64 = 1e-4;
    let mut worst = 0.0f64;
    println!("primitive gradients, 64-bit central differences:");
    for row in fdsuite::primitive_reports(s.seed)? {
        let err = row.report.max_rel_err();
        worst = worst.max(err);
        println!("  {:<24} max rel err {:.3e}", row.name, err);
    }
    println!("end-to-end {} model, per parameter group:", s.variant);
    let report = fdsuite::model_report(s.variant, 3, s.seed)?;
    for row in &report.rows {
        worst = worst.max(row.max_rel_err);
        println!("  {:<34} max rel err {:.3e}", row.name, row.max_rel_err);
    }
    println!("worst over all checks: {worst:.3e} (tolerance {TOL:.0e})");
    if worst >= TOL {
        return Err(PipelineError::Invalid(format!(
            "gradient check failed: {worst:.3e} >= {TOL:.0e}"
        )));
    }
    Ok(())
}

pub fn attn_export(s: &Settings) -> Result<(), PipelineError> {
    ensure_dir(&s.out)?;
    if s.variant != Variant::Cpa {
        return Err(PipelineError::Invalid(format!(
            "attn-export needs --variant cpa (got {})",
            s.variant
        )));
    }
    let image = if s.data_root.extension().and_then(|e| e.to_str()) == Some("ppm") {
        raster::read_ppm(&s.data_root)?
    } else {
        scene::generate_scene(s.seed, "mixed", 6, &SceneConfig::default())?.image
    };
    let mut model = SegModel::<f32>::new(s.model_config())?;
    load_weights(s, &mut model)?;
    let unit = model.extent_multiple();
    let (h, w) = ((image.h / unit) * unit, (image.w / unit) * unit);
    if h == 0 || w == 0 {
        return Err(PipelineError::Invalid(format!(
            "raster {}x{} is smaller than the {unit}px minimum",
            image.w, image.h
        )));
    }
    let image = image.crop(0, 0, h, w);
    let mut g: Graph<f32> = Graph::new();
    let x = g.leaf(image.to_tensor());
    let out = model.forward(&mut g, x, Phase::eval())?;
    let trace = out
        .trace
        .ok_or_else(|| PipelineError::Invalid("forward produced no attention trace".into()))?;
    // One affinity row per pyramid scale, for the query at the feature-map
    // center: raw pooled extent plus an image-extent upsample.
    for t in &trace.spatial {
        let query = (t.h / 2) * t.w + t.w / 2;
        let bytes = affinity_row_to_gray(&g, t.affinity, query, t.h, t.w)?;
        let mut gray = GrayRaster::new(t.w, t.h);
        gray.data.copy_from_slice(&bytes);
        let raw = s.out.join(format!("attn_scale{}.pgm", t.scale));
        raster::write_gray_pgm(&raw, &gray)?;
        let full = s.out.join(format!("attn_scale{}_full.pgm", t.scale));
        raster::write_gray_pgm(&full, &upsample_gray(&gray, h, w)?)?;
        println!(
            "scale {}: {}x{} affinity row for center query -> {}, {}",
            t.scale,
            t.h,
            t.w,
            raw.display(),
            full.display()
        );
    }
    let channel = g.value(trace.channel);
    let cs = channel.shape();
    let gray = normalize_to_gray(channel.data(), cs.w, cs.h);
    let path = s.out.join("attn_channel.pgm");
    raster::write_gray_pgm(&path, &gray)?;
    println!("channel affinity {}x{} -> {}", cs.h, cs.w, path.display());
    Ok(())
}

fn upsample_gray(gray: &GrayRaster, h: usize, w: usize) -> Result<GrayRaster, PipelineError> {
    let mut g: Graph<f32> = Graph::new();
    let data: Vec<f32> = gray.data.iter().map(|&b| b as f32 / 255.0).collect();
    let t = Tensor::from_vec(Shape::new(1, 1, gray.h, gray.w), data)?;
    let node = g.leaf(t);
    let up = g.bilinear_resize(node, h, w)?;
    let mut out = GrayRaster::new(w, h);
    for (dst, &v) in out.data.iter_mut().zip(g.value(up).data()) {
        *dst = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    }
    Ok(out)
}

fn normalize_to_gray(values: &[f32], w: usize, h: usize) -> GrayRaster {
    let lo = values.iter().cloned().fold(f32::INFINITY, f32::min);
    let hi = values.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut out = GrayRaster::new(w, h);
    for (dst, &v) in out.data.iter_mut().zip(values) {
        *dst = (((v - lo) / span) * 255.0).round() as u8;
    }
    out
}

/// Deterministic full-tile texture; content is irrelevant to timing.
fn bench_tile(extent: usize, seed: u64) -> RgbRaster {
    let mut img = RgbRaster::new(extent, extent);
    for y in 0..extent {
        let row = rng::derive(seed, &[y as u64]);
        for x in 0..extent {
            let v = row ^ rng::derive(row, &[x as u64]);
            img.set(y, x, [v as u8, (v >> 8) as u8, (v >> 16) as u8]);
        }
    }
    img
}

pub fn bench(s: &Settings) -> Result<(), PipelineError> {
    ensure_dir(&s.out)?;
    let crop = s.crop.unwrap_or(500);
    let stride = s.stride.unwrap_or(crop);
    let image = bench_tile(BENCH_EXTENT, s.seed);
    println!(
        "tiled {} inference over a {BENCH_EXTENT}x{BENCH_EXTENT} synthetic tile, crop {crop}, stride {stride}, threads {}",
        s.variant, s.threads
    );
    let header = format!(
        "{:<9} {:>6} {:>8} {:>11} {:>10}",
        "backbone", "crops", "wall_s", "s_per_crop", "Mpx_per_s"
    );
    println!("{header}");
    let mut csv = String::from("backbone,variant,crop,stride,threads,crops,wall_seconds,seconds_per_crop\n");
    for backbone in [Backbone::Tiny, Backbone::Small] {
        let model = SegModel::<f32>::new(s.model_config_for(backbone))?;
        let (_, _, stats) = infer::infer_tiled(&model, &image, crop, stride, s.threads)?;
        let mpx = (BENCH_EXTENT * BENCH_EXTENT) as f64 / stats.wall_seconds / 1e6;
        println!(
            "{:<9} {:>6} {:>8.1} {:>11.3} {:>10.2}",
            backbone.to_string(),
            stats.crops,
            stats.wall_seconds,
            stats.seconds_per_crop,
            mpx
        );
        csv.push_str(&format!(
            "{},{},{},{},{},{},{:.3},{:.4}\n",
            backbone,
            s.variant,
            crop,
            stride,
            s.threads,
            stats.crops,
            stats.wall_seconds,
            stats.seconds_per_crop
        ));
    }
    write_text(&s.out.join("bench.csv"), &csv)
}
