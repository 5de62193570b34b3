//! Command implementations behind the CLI surface.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use mcgsm::image::crop_to_multiple;
use mcgsm::neighborhoods::{extract_pairs, MaskSpec, PatchDataset};
use mcgsm::pyramid::{build_pyramid, collapse_pyramid, Pyramid, PyramidLevel};
use mcgsm::rates::{cross_mir, EvalConfig, RateReport};
use mcgsm::sampler::{default_burn_in, synthesize, SampleConfig};
use mcgsm::synth::{generate_dead_leaves, phase_scramble, DeadLeavesConfig};
use mcgsm::trainer::{train, TrainConfig};
use mcgsm::{Image, MultiscaleModel, ScaleModel};
use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;

use crate::imageio::{load_corpus, read_single, write_image};
use crate::modelfile::{ModelFile, TrainMeta};

pub struct TrainArgs {
    pub corpus: PathBuf,
    pub output: PathBuf,
    pub depth: usize,
    pub components: usize,
    pub scales: usize,
    pub coarse_rows: usize,
    pub coarse_width: usize,
    pub window: usize,
    pub samples: usize,
    pub max_iters: usize,
    pub validation_fraction: f64,
    pub seed: u64,
}

impl Default for TrainArgs {
    fn default() -> Self {
        // Depth 3, 8 components with 4 scales each, a 24-pixel coarse
        // neighborhood, 3x3 superpixel windows, 200000 training pairs.
        TrainArgs {
            corpus: PathBuf::new(),
            output: PathBuf::new(),
            depth: 3,
            components: 8,
            scales: 4,
            coarse_rows: 3,
            coarse_width: 7,
            window: 3,
            samples: 200_000,
            max_iters: 200,
            validation_fraction: 0.1,
            seed: 0,
        }
    }
}

/// Undo per-part centering, stack, and re-center globally.
pub fn concat_datasets(parts: Vec<PatchDataset>) -> Result<PatchDataset> {
    let Some(first) = parts.first() else {
        bail!("no datasets to concatenate");
    };
    let (d_in, d_out) = (first.d_in(), first.d_out());
    let n: usize = parts.iter().map(|p| p.len()).sum();
    let mut inputs = Array2::zeros((n, d_in));
    let mut outputs = Array2::zeros((n, d_out));
    let mut row = 0;
    for part in &parts {
        if part.d_in() != d_in || part.d_out() != d_out {
            bail!("dataset dimensions disagree across images");
        }
        for i in 0..part.len() {
            for j in 0..d_in {
                inputs[[row, j]] = part.inputs[[i, j]] + part.input_mean[j];
            }
            for j in 0..d_out {
                outputs[[row, j]] = part.outputs[[i, j]] + part.output_mean[j];
            }
            row += 1;
        }
    }
    let input_mean = inputs.sum_axis(ndarray::Axis(0)) / n as f64;
    let output_mean = outputs.sum_axis(ndarray::Axis(0)) / n as f64;
    for mut r in inputs.rows_mut() {
        r -= &input_mean;
    }
    for mut r in outputs.rows_mut() {
        r -= &output_mean;
    }
    Ok(PatchDataset {
        inputs,
        outputs,
        input_mean,
        output_mean,
        source: first.source.clone(),
    })
}

/// Extract pooled per-scale datasets from a corpus: one dataset per detail
/// level (finest first) plus the coarse-scale dataset and the coarse plane
/// standard deviation.
pub fn extract_scale_datasets(
    images: &[Image],
    depth: usize,
    coarse_mask_spec: MaskSpec,
    detail_mask_spec: MaskSpec,
    samples_per_scale: usize,
    seed: u64,
) -> Result<(Vec<PatchDataset>, PatchDataset, f64)> {
    let coarse_mask = coarse_mask_spec.build()?;
    let detail_mask = detail_mask_spec.build()?;
    let quota = samples_per_scale.div_ceil(images.len()).max(1);
    let mut rng = ChaCha12Rng::seed_from_u64(seed);

    let mut detail_parts: Vec<Vec<PatchDataset>> = vec![Vec::new(); depth];
    let mut coarse_parts = Vec::new();
    let mut coarse_sum = 0.0;
    let mut coarse_sumsq = 0.0;
    let mut coarse_n = 0usize;

    for img in images {
        let img = crop_to_multiple(img, depth)?;
        let pyr = build_pyramid(&img, depth)?;
        for (k, level) in pyr.levels.iter().enumerate() {
            let mut ds = extract_pairs(&level.channels(), &detail_mask, quota, &mut rng)?;
            ds.source.scale = k;
            ds.source.mask = format!("{detail_mask_spec:?}");
            detail_parts[k].push(ds);
        }
        let mut ds = extract_pairs(std::slice::from_ref(&pyr.coarse), &coarse_mask, quota, &mut rng)?;
        ds.source.scale = depth;
        ds.source.mask = format!("{coarse_mask_spec:?}");
        coarse_parts.push(ds);
        for v in pyr.coarse.iter() {
            coarse_sum += v;
            coarse_sumsq += v * v;
            coarse_n += 1;
        }
    }

    let details: Result<Vec<PatchDataset>> =
        detail_parts.into_iter().map(concat_datasets).collect();
    let coarse = concat_datasets(coarse_parts)?;
    let mean = coarse_sum / coarse_n as f64;
    let coarse_std = (coarse_sumsq / coarse_n as f64 - mean * mean).max(0.0).sqrt();
    Ok((details?, coarse, coarse_std))
}

/// Train a full multiscale model from a corpus and return it with metadata.
pub fn train_model(images: &[Image], args: &TrainArgs) -> Result<(MultiscaleModel, TrainMeta)> {
    if images.is_empty() {
        bail!("empty corpus");
    }
    let coarse_spec = MaskSpec::Causal {
        rows_above: args.coarse_rows,
        row_width: args.coarse_width,
    };
    let detail_spec = MaskSpec::Superpixel { window: args.window };

    let (detail_data, coarse_data, coarse_std) = extract_scale_datasets(
        images,
        args.depth,
        coarse_spec,
        detail_spec,
        args.samples,
        args.seed,
    )?;

    let cfg = TrainConfig {
        max_iters: args.max_iters,
        validation_fraction: args.validation_fraction,
        seed: args.seed,
        ..TrainConfig::default()
    };

    let mut details = Vec::with_capacity(args.depth);
    let mut final_lls = Vec::new();
    let mut val_lls = Vec::new();
    for (k, ds) in detail_data.iter().enumerate() {
        eprintln!(
            "training detail scale {k}: {} pairs, {} -> {}",
            ds.len(),
            ds.d_in(),
            ds.d_out()
        );
        let out = train(ds, args.components, args.scales, &cfg)?;
        final_lls.push(out.trace.iterations.last().map(|r| r.objective).unwrap_or(f64::NAN));
        val_lls.push(out.trace.best_validation_ll);
        details.push(ScaleModel { params: out.params, mask_spec: detail_spec });
    }
    eprintln!(
        "training coarse scale: {} pairs, {} -> 1",
        coarse_data.len(),
        coarse_data.d_in()
    );
    let out = train(&coarse_data, args.components, args.scales, &cfg)?;
    final_lls.push(out.trace.iterations.last().map(|r| r.objective).unwrap_or(f64::NAN));
    val_lls.push(out.trace.best_validation_ll);
    let coarse = ScaleModel { params: out.params, mask_spec: coarse_spec };

    let model = MultiscaleModel { coarse, details };
    let meta = TrainMeta {
        corpus: args.corpus.display().to_string(),
        n_images: images.len(),
        seed: args.seed,
        samples_per_scale: args.samples,
        n_components: args.components,
        n_scales: args.scales,
        max_iters: args.max_iters,
        validation_fraction: args.validation_fraction,
        final_train_ll: final_lls,
        validation_ll: val_lls,
        coarse_std,
    };
    Ok((model, meta))
}

pub fn cmd_train(args: &TrainArgs) -> Result<()> {
    let images = load_corpus(&args.corpus)?;
    eprintln!("loaded {} images from {}", images.len(), args.corpus.display());
    let (model, meta) = train_model(&images, args)?;
    ModelFile::from_model(&model, meta).save(&args.output)?;
    eprintln!("wrote {}", args.output.display());
    Ok(())
}

pub struct SampleArgs {
    pub model: PathBuf,
    pub output_dir: PathBuf,
    pub height: usize,
    pub width: usize,
    pub count: usize,
    pub seed: u64,
    pub burn_in: Option<usize>,
    pub boundary_sigma: Option<f64>,
}

pub fn cmd_sample(args: &SampleArgs) -> Result<()> {
    let file = ModelFile::load(&args.model)?;
    let model = file.to_model()?;
    let sigma = args
        .boundary_sigma
        .unwrap_or(0.1 * if file.metadata.coarse_std > 0.0 { file.metadata.coarse_std } else { 1.0 });
    let burn_in = match args.burn_in {
        Some(b) => b,
        None => default_burn_in(&model.coarse.mask()?),
    };
    fs::create_dir_all(&args.output_dir)
        .with_context(|| format!("creating {}", args.output_dir.display()))?;

    let results: Result<Vec<PathBuf>> = (0..args.count)
        .into_par_iter()
        .map(|i| {
            let cfg = SampleConfig {
                height: args.height,
                width: args.width,
                burn_in,
                boundary_sigma: sigma,
                seed: args.seed.wrapping_add(i as u64),
            };
            let img = synthesize(&model, &cfg)?;
            let path = args.output_dir.join(format!("sample_{i:04}.img"));
            write_image(&path, &[img])?;
            Ok(path)
        })
        .collect();
    for p in results? {
        println!("{}", p.display());
    }
    Ok(())
}

pub struct EvalArgs {
    pub model: PathBuf,
    pub corpus: PathBuf,
    pub output: Option<PathBuf>,
    pub pairs_per_image: usize,
    pub bootstrap_reps: usize,
    pub seed: u64,
}

pub fn cmd_eval(args: &EvalArgs) -> Result<RateReport> {
    let model = ModelFile::load(&args.model)?.to_model()?;
    let images = load_corpus(&args.corpus)?;
    let cfg = EvalConfig {
        max_pairs_per_image: args.pairs_per_image,
        bootstrap_reps: args.bootstrap_reps,
        seed: args.seed,
        ..EvalConfig::default()
    };
    let report = cross_mir(&model, &images, &cfg)?;
    print_report(&report);
    if let Some(path) = &args.output {
        fs::write(path, serde_json::to_string_pretty(&report)?)
            .with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(report)
}

pub fn print_report(r: &RateReport) {
    println!("images evaluated        : {}", r.n_images);
    println!("pairs per level         : {:?}", r.n_pairs);
    for (k, (rate, se)) in r.detail_rates.iter().zip(&r.detail_rate_ses).enumerate() {
        println!(
            "detail rate level {k}    : {rate:9.4} bits/superpixel ({:.4}/channel, se {se:.4})",
            r.detail_rates_per_channel[k]
        );
    }
    println!(
        "coarse rate             : {:9.4} bits/pixel (se {:.4})",
        r.coarse_rate, r.coarse_rate_se
    );
    println!(
        "combined entropy rate   : {:9.4} bits/pixel (se {:.4})",
        r.combined_rate, r.combined_rate_se
    );
    println!(
        "marginal entropy        : {:9.4} bits (se {:.4}, {} samples)",
        r.marginal_entropy, r.marginal_entropy_se, r.n_marginal_samples
    );
    println!(
        "cross-MIR               : {:9.4} bits/pixel (se {:.4})",
        r.cross_mir, r.cross_mir_se
    );
    for (k, (mir, se)) in r.per_scale_mir.iter().zip(&r.per_scale_mir_se).enumerate() {
        println!("cross-MIR at scale {k}   : {mir:9.4} bits (se {se:.4})");
    }
}

pub struct DeadLeavesArgs {
    pub output_dir: PathBuf,
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub r_min: f64,
    pub r_max: f64,
    pub exponent: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

pub fn cmd_deadleaves(args: &DeadLeavesArgs) -> Result<()> {
    fs::create_dir_all(&args.output_dir)
        .with_context(|| format!("creating {}", args.output_dir.display()))?;
    let results: Result<Vec<()>> = (0..args.count)
        .into_par_iter()
        .map(|i| {
            let cfg = DeadLeavesConfig {
                height: args.height,
                width: args.width,
                r_min: args.r_min,
                r_max: args.r_max,
                exponent: args.exponent,
                noise_sigma: args.noise_sigma,
                seed: args.seed.wrapping_add(i as u64),
            };
            let img = generate_dead_leaves(&cfg)?;
            write_image(&args.output_dir.join(format!("leaves_{i:04}.img")), &[img])?;
            Ok(())
        })
        .collect();
    results?;
    let sidecar = serde_json::json!({
        "generator": "dead_leaves",
        "count": args.count,
        "height": args.height,
        "width": args.width,
        "r_min": args.r_min,
        "r_max": args.r_max,
        "exponent": args.exponent,
        "noise_sigma": args.noise_sigma,
        "seed": args.seed,
    });
    fs::write(
        args.output_dir.join("deadleaves_meta.json"),
        serde_json::to_string_pretty(&sidecar)?,
    )?;
    eprintln!("wrote {} images to {}", args.count, args.output_dir.display());
    Ok(())
}

pub fn cmd_scramble(input: &Path, output: &Path, seed: u64) -> Result<()> {
    let img = read_single(input)?;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let out = phase_scramble(&img, &mut rng);
    write_image(output, &[out])?;
    Ok(())
}

pub struct LpStatArgs {
    pub corpus: PathBuf,
    pub offsets: Vec<usize>,
    pub sigma_f: f64,
    pub output: Option<PathBuf>,
}

pub fn cmd_lpstat(args: &LpStatArgs) -> Result<()> {
    let images = load_corpus(&args.corpus)?;
    let fits = mcgsm::filterstats::lp_profile(&images, &args.offsets, args.sigma_f)?;
    println!("{:>6} {:>8} {:>10} {:>10} {:>10} {:>12} {:>9}", "d", "p", "se", "shape", "scale", "avg_ll", "boundary");
    for f in &fits {
        println!(
            "{:>6} {:>8.4} {:>10.4} {:>10.4} {:>10.4} {:>12.5} {:>9}",
            f.offset, f.p, f.p_se, f.shape, f.scale, f.avg_log_likelihood, f.hit_boundary
        );
    }
    if let Some(path) = &args.output {
        fs::write(path, serde_json::to_string_pretty(&fits)?)?;
    }
    Ok(())
}

/// Forward direction: write each level's four channels and the coarse image.
pub fn cmd_pyramid_forward(input: &Path, depth: usize, output_dir: &Path) -> Result<()> {
    let img = read_single(input)?;
    let img = crop_to_multiple(&img, depth)?;
    let pyr = build_pyramid(&img, depth)?;
    fs::create_dir_all(output_dir)?;
    for (k, level) in pyr.levels.iter().enumerate() {
        write_image(&output_dir.join(format!("level_{k}.img")), &level.channels())?;
    }
    write_image(&output_dir.join("coarse.img"), std::slice::from_ref(&pyr.coarse))?;
    eprintln!("decomposed {} levels into {}", depth, output_dir.display());
    Ok(())
}

/// Inverse direction: read a forward decomposition and reconstruct.
pub fn cmd_pyramid_inverse(input_dir: &Path, output: &Path) -> Result<()> {
    let coarse = read_single(&input_dir.join("coarse.img"))?;
    let mut levels = Vec::new();
    for k in 0.. {
        let path = input_dir.join(format!("level_{k}.img"));
        if !path.exists() {
            break;
        }
        let mut chans = crate::imageio::read_image(&path)?;
        if chans.len() != 4 {
            bail!("{}: expected 4 channels", path.display());
        }
        let low = chans.remove(0);
        let d1 = chans.remove(0);
        let d2 = chans.remove(0);
        let d3 = chans.remove(0);
        levels.push(PyramidLevel { details: [d1, d2, d3], low });
    }
    let pyr = Pyramid { levels, coarse };
    let img = collapse_pyramid(&pyr);
    write_image(output, &[img])?;
    Ok(())
}

/// Standard deviation of every pixel in a corpus (sampler noise defaults).
pub fn corpus_pixel_std(images: &[Image]) -> f64 {
    let mut sum = 0.0;
    let mut sumsq = 0.0;
    let mut n = 0usize;
    for img in images {
        for v in img.iter() {
            sum += v;
            sumsq += v * v;
            n += 1;
        }
    }
    let mean = sum / n as f64;
    (sumsq / n as f64 - mean * mean).max(0.0).sqrt()
}

/// Re-export used by tests to fabricate datasets without a corpus.
pub fn dataset_from_arrays(
    inputs: Array2<f64>,
    outputs: Array2<f64>,
) -> PatchDataset {
    let d_in = inputs.ncols();
    let d_out = outputs.ncols();
    PatchDataset {
        inputs,
        outputs,
        input_mean: Array1::zeros(d_in),
        output_mean: Array1::zeros(d_out),
        source: Default::default(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use mcgsm::neighborhoods::causal_mask as cmask;
    use rand::Rng;

    #[test]
    fn concat_recenters_globally() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let mask = cmask(1, 3).unwrap();
        let img1 = Array2::from_shape_fn((12, 12), |_| rng.random::<f64>() + 5.0);
        let img2 = Array2::from_shape_fn((12, 12), |_| rng.random::<f64>() - 5.0);
        let a = extract_pairs(&[img1], &mask, 1000, &mut rng).unwrap();
        let b = extract_pairs(&[img2], &mask, 1000, &mut rng).unwrap();
        let both = concat_datasets(vec![a.clone(), b.clone()]).unwrap();
        assert_eq!(both.len(), a.len() + b.len());
        // Global columns are centered.
        for j in 0..both.d_in() {
            let m: f64 = both.inputs.column(j).sum() / both.len() as f64;
            assert!(m.abs() < 1e-10);
        }
        // Raw values survive: first row of `a` un-centered equals first row
        // of `both` un-centered.
        for j in 0..both.d_in() {
            let raw_a = a.inputs[[0, j]] + a.input_mean[j];
            let raw_b = both.inputs[[0, j]] + both.input_mean[j];
            assert!((raw_a - raw_b).abs() < 1e-12);
        }
    }

    #[test]
    fn scale_extraction_shapes() {
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let images: Vec<Image> = (0..3)
            .map(|_| Array2::from_shape_fn((32, 32), |_| rng.random::<f64>()))
            .collect();
        let (details, coarse, std) = extract_scale_datasets(
            &images,
            2,
            MaskSpec::Causal { rows_above: 1, row_width: 3 },
            MaskSpec::Superpixel { window: 3 },
            600,
            7,
        )
        .unwrap();
        assert_eq!(details.len(), 2);
        assert_eq!(details[0].d_in(), 21);
        assert_eq!(details[0].d_out(), 3);
        assert_eq!(coarse.d_in(), 4);
        assert!(std > 0.0);
    }
}
