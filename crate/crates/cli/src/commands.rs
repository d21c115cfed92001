use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use wavescore_core::config::{ExperimentConfig, ModelKind};
use wavescore_core::data::Dataset;
use wavescore_core::eval::{
    export_heatmap, mse_decomposition_check, multiscale_denoise, psnr, psnr_curve, write_psnr_csv,
    MultiscalePipeline,
};
use wavescore_core::imageio::{read_gray, write_gray};
use wavescore_core::model::{
    build_conditional_denoiser_with, build_lowpass_denoiser, build_pixel_denoiser, jacobian_row,
    LocalConfig, LowpassConfig,
};
use wavescore_core::oracle::NoiseLevel;
use wavescore_core::sampler::{
    derive_seed, sample_score_ascent, superres_pixel_constrained, synthesize_cascade, SampleTrace,
};
use wavescore_core::train::{corrupt, train_denoiser_with};
use wavescore_core::wavelet::build_pyramid;
use wavescore_core::{
    load_checkpoint, save_checkpoint, Basis, ConditionalDenoiser, Denoiser, Error, GaussianModel, Model,
    Result, Tensor,
};

use crate::{ensure_dir, Command, Pipeline, Prior, SuperresMethod};

pub(crate) fn execute(cmd: &Command, cfg: &ExperimentConfig) -> Result<()> {
    match cmd {
        Command::Train {
            checkpoint,
            max_steps,
            ..
        } => train(cfg, checkpoint.as_deref(), *max_steps),
        Command::Denoise {
            input,
            sigma,
            pipeline,
            ..
        } => denoise(cfg, input, *sigma, *pipeline),
        Command::Sample { pipeline, .. } => sample(cfg, *pipeline),
        Command::Superres {
            input,
            method,
            prior,
            ..
        } => superres(cfg, input, *method, *prior),
        Command::Synthesize { prior, .. } => synthesize(cfg, *prior),
        Command::EvalPsnr { sigma, pipeline, .. } => eval_psnr(cfg, sigma, *pipeline),
        Command::Jacobian {
            input,
            sigma,
            pipeline,
            row,
            col,
            ..
        } => jacobian(cfg, input.as_deref(), *sigma, *pipeline, *row, *col),
        Command::OracleCheck { trials, .. } => oracle_check(cfg, *trials),
    }
}

fn output_file(cfg: &ExperimentConfig, name: &str) -> Result<PathBuf> {
    ensure_dir(&cfg.experiment.output)?;
    Ok(cfg.experiment.output.join(name))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::File {
            path: path.to_path_buf(),
            source: e,
        })
}

fn write_with(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> Result<()> {
    let mut w = create(path)?;
    f(&mut w).and_then(|_| w.flush()).map_err(|e| Error::File {
        path: path.to_path_buf(),
        source: e,
    })
}

fn load_model(path: &Path) -> Result<Model<f32>> {
    Ok(load_checkpoint(path)?.model)
}

fn require<'a>(path: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    path.as_deref()
        .ok_or_else(|| Error::Config(format!("config sets no [model] {what} checkpoint")))
}

fn conditional_models(cfg: &ExperimentConfig) -> Result<Vec<Model<f32>>> {
    let paths = &cfg.model.conditional;
    if paths.len() != cfg.model.depth {
        return Err(Error::Config(format!(
            "depth {} needs {} conditional checkpoints, config lists {}",
            cfg.model.depth,
            cfg.model.depth,
            paths.len()
        )));
    }
    paths.iter().map(|p| load_model(p)).collect()
}

/// Haar oracle matching the configured depth.
fn haar_oracle(cfg: &ExperimentConfig) -> Result<GaussianModel> {
    let g = cfg.oracle()?;
    match g.basis() {
        Basis::Haar { depth } if depth == cfg.model.depth => Ok(g),
        other => Err(Error::UnsupportedModel(format!(
            "conditional oracles need basis haar:{}, config has {other}",
            cfg.model.depth
        ))),
    }
}

/// Any configured denoising pipeline.
enum Loaded {
    Multiscale(MultiscalePipeline<Model<f32>, Model<f32>>),
    Pixel(Model<f32>),
    Oracle(GaussianModel),
}

impl Loaded {
    fn new(cfg: &ExperimentConfig, pipeline: Pipeline) -> Result<Self> {
        Ok(match pipeline {
            Pipeline::Multiscale => Loaded::Multiscale(MultiscalePipeline {
                lowpass: load_model(require(&cfg.model.lowpass, "lowpass")?)?,
                conditional: conditional_models(cfg)?,
            }),
            Pipeline::Pixel => Loaded::Pixel(load_model(require(&cfg.model.pixel, "pixel")?)?),
            Pipeline::Oracle => Loaded::Oracle(cfg.oracle()?),
        })
    }
}

impl Denoiser for Loaded {
    fn denoise(&self, noisy: &Tensor<f64>) -> Result<Tensor<f64>> {
        match self {
            Loaded::Multiscale(p) => p.denoise(noisy),
            Loaded::Pixel(m) => m.denoise(noisy),
            Loaded::Oracle(g) => g.denoiser(NoiseLevel::Estimated).denoise(noisy),
        }
    }
}

fn train(cfg: &ExperimentConfig, checkpoint: Option<&Path>, max_steps: Option<usize>) -> Result<()> {
    let m = &cfg.model;
    let local = |default_layers| LocalConfig {
        rf: m.rf,
        conv_layers: m.layers.unwrap_or(default_layers),
        width: m.width,
        residual: true,
        seed: cfg.experiment.seed,
    };
    let mut model = match m.kind {
        ModelKind::Lowpass => build_lowpass_denoiser(&LowpassConfig {
            conv_layers: m.layers.unwrap_or(20),
            width: m.width,
            seed: cfg.experiment.seed,
            ..LowpassConfig::default()
        })?,
        ModelKind::Conditional => build_conditional_denoiser_with(&local(21))?,
        ModelKind::Pixel => build_pixel_denoiser(&local(21))?,
    };
    let mut tc = cfg.train_config();
    if max_steps.is_some() {
        tc.max_steps = max_steps;
    }
    let data = Dataset::load(&cfg.data)?;
    let mode = cfg.train_mode();
    eprintln!(
        "training {} ({} parameters, rf {}) as {mode} on {} images",
        model.spec.name,
        model.parameter_count(),
        model.receptive_field(),
        data.train.len()
    );
    let ckpt = train_denoiser_with(&mut model, &data.train, &tc, mode, |r| {
        if r.step % 50 == 0 {
            eprintln!("epoch {} step {} loss {:.6}", r.epoch, r.step, r.loss);
        }
    })?;
    let path = match checkpoint.or(m.checkpoint.as_deref()) {
        Some(p) => p.to_path_buf(),
        None => output_file(cfg, &format!("{}.ckpt", mode.to_string().replace(':', "-")))?,
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        ensure_dir(dir)?;
    }
    save_checkpoint(&ckpt, &path)?;
    let csv = path.with_extension("loss.csv");
    write_with(&csv, |w| ckpt.meta.write_loss_csv(w))?;
    let last = ckpt.meta.loss_history.last().map_or(f64::NAN, |r| r.loss);
    println!(
        "wrote {} after {} steps (final loss {last:.6}); loss history {}",
        path.display(),
        ckpt.meta.step,
        csv.display()
    );
    Ok(())
}

fn denoise(cfg: &ExperimentConfig, input: &Path, sigma: Option<f64>, pipeline: Pipeline) -> Result<()> {
    let clean = read_gray(input)?;
    let denoiser = Loaded::new(cfg, pipeline)?;
    let noisy = match sigma {
        Some(s) => corrupt(&clean, s, cfg.experiment.seed)?,
        None => clean.clone(),
    };
    let out = match &denoiser {
        Loaded::Multiscale(p) => {
            let r = multiscale_denoise(&noisy, &p.lowpass, &p.conditional, p.depth())?;
            eprintln!(
                "wavelet MSE decomposition: pixels {:.6e}, bands {:.6e}, gap {:.1e}",
                r.check.lhs, r.check.rhs, r.check.gap
            );
            r.image
        }
        other => other.denoise(&noisy)?,
    };
    let path = output_file(cfg, "denoised.png")?;
    write_gray(&path, &out)?;
    if sigma.is_some() {
        write_gray(&output_file(cfg, "noisy.png")?, &noisy)?;
        println!(
            "PSNR noisy {:.2} dB, denoised {:.2} dB",
            psnr(&clean, &noisy, 1.0)?,
            psnr(&clean, &out, 1.0)?
        );
    }
    println!("wrote {}", path.display());
    Ok(())
}

fn write_trace(cfg: &ExperimentConfig, name: &str, trace: &SampleTrace) -> Result<()> {
    let path = output_file(cfg, name)?;
    write_with(&path, |w| trace.write_csv(w))
}

/// Oracle samples are zero-mean; they are shifted to mid-gray for display.
fn write_image(cfg: &ExperimentConfig, name: &str, x: &Tensor<f64>, zero_mean: bool) -> Result<PathBuf> {
    let path = output_file(cfg, name)?;
    if zero_mean {
        write_gray(&path, &x.map(|v| v + 0.5))?;
    } else {
        write_gray(&path, x)?;
    }
    Ok(path)
}

fn sample(cfg: &ExperimentConfig, pipeline: Pipeline) -> Result<()> {
    if pipeline == Pipeline::Multiscale {
        return synthesize(cfg, Prior::Trained);
    }
    let side = cfg.data.side;
    let denoiser = Loaded::new(cfg, pipeline)?;
    let (x, trace) = sample_score_ascent(&denoiser, &[1, side, side], &cfg.sampler)?;
    write_trace(cfg, "sample_trace.csv", &trace)?;
    let path = write_image(cfg, "sample.png", &x, pipeline == Pipeline::Oracle)?;
    println!("wrote {} after {} iterations", path.display(), trace.iterations);
    Ok(())
}

fn cascade<C: ConditionalDenoiser>(
    cfg: &ExperimentConfig,
    models: &[C],
    lowpass: &Tensor<f64>,
) -> Result<Tensor<f64>> {
    let out = synthesize_cascade(models, lowpass, &cfg.sampler)?;
    for (k, t) in out.traces.iter().enumerate() {
        let j = models.len() - k;
        write_trace(cfg, &format!("trace_scale{j}.csv"), t)?;
    }
    let check = build_pyramid(&out.image, models.len())?.lowpass.sub(lowpass)?.max_abs();
    eprintln!("low-pass consistency: max deviation {check:.1e}");
    Ok(out.image)
}

fn synthesize(cfg: &ExperimentConfig, prior: Prior) -> Result<()> {
    let depth = cfg.model.depth;
    let band = cfg.data.side >> depth;
    let lp_cfg = cfg.sampler.with_seed(derive_seed(cfg.sampler.seed, 0));
    let x = match prior {
        Prior::Trained => {
            let low = load_model(require(&cfg.model.lowpass, "lowpass")?)?;
            let (xj, trace) = sample_score_ascent(&low, &[1, band, band], &lp_cfg)?;
            write_trace(cfg, "trace_lowpass.csv", &trace)?;
            cascade(cfg, &conditional_models(cfg)?, &xj)?
        }
        Prior::Oracle => {
            let g = haar_oracle(cfg)?;
            let marginal = g.lowpass_marginal(depth)?;
            let (xj, trace) =
                sample_score_ascent(&marginal.denoiser(NoiseLevel::Estimated), &[1, band, band], &lp_cfg)?;
            write_trace(cfg, "trace_lowpass.csv", &trace)?;
            let conds = (1..=depth)
                .map(|j| g.conditional_detail_denoiser(j, NoiseLevel::Estimated))
                .collect::<Result<Vec<_>>>()?;
            cascade(cfg, &conds, &xj)?
        }
    };
    let path = write_image(cfg, "synthesis.png", &x, prior == Prior::Oracle)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn superres(cfg: &ExperimentConfig, input: &Path, method: SuperresMethod, prior: Prior) -> Result<()> {
    let depth = cfg.model.depth;
    let x = read_gray(input)?;
    let lowpass = build_pyramid(&x, depth)?.lowpass;
    let out = match (method, prior) {
        (SuperresMethod::Cascade, Prior::Trained) => cascade(cfg, &conditional_models(cfg)?, &lowpass)?,
        (SuperresMethod::Cascade, Prior::Oracle) => {
            let g = haar_oracle(cfg)?;
            let conds = (1..=depth)
                .map(|j| g.conditional_detail_denoiser(j, NoiseLevel::Estimated))
                .collect::<Result<Vec<_>>>()?;
            cascade(cfg, &conds, &lowpass)?
        }
        (SuperresMethod::Pixel, prior) => {
            let denoiser = Loaded::new(
                cfg,
                if prior == Prior::Oracle { Pipeline::Oracle } else { Pipeline::Pixel },
            )?;
            let (img, trace) = superres_pixel_constrained(&denoiser, &lowpass, depth, &cfg.sampler)?;
            write_trace(cfg, "trace_superres.csv", &trace)?;
            img
        }
    };
    let path = write_image(cfg, "superres.png", &out, false)?;
    println!(
        "wrote {}; PSNR against the original {:.2} dB",
        path.display(),
        psnr(&x, &out, 1.0)?
    );
    Ok(())
}

fn eval_psnr(cfg: &ExperimentConfig, sigma: &[f64], pipeline: Pipeline) -> Result<()> {
    let grid = if sigma.is_empty() {
        cfg.experiment.noise_grid.clone()
    } else {
        sigma.to_vec()
    };
    let denoiser = Loaded::new(cfg, pipeline)?;
    let data = Dataset::load(&cfg.data)?;
    let rows = psnr_curve(&denoiser, &data.test, &grid, cfg.experiment.seed)?;
    let path = output_file(cfg, "psnr.csv")?;
    write_with(&path, |w| write_psnr_csv(&rows, w))?;
    write_psnr_csv(&rows, std::io::stdout().lock())?;
    eprintln!("wrote {}", path.display());
    Ok(())
}

fn jacobian(
    cfg: &ExperimentConfig,
    input: Option<&Path>,
    sigma: f64,
    pipeline: Pipeline,
    row: Option<usize>,
    col: Option<usize>,
) -> Result<()> {
    let clean = match input {
        Some(p) => read_gray(p)?,
        None => Dataset::load(&cfg.data)?
            .test
            .into_iter()
            .next()
            .ok_or_else(|| Error::Config("dataset has no test images".into()))?,
    };
    let noisy = corrupt(&clean, sigma, cfg.experiment.seed)?;
    let (model, image) = match pipeline {
        Pipeline::Pixel => (load_model(require(&cfg.model.pixel, "pixel")?)?, noisy),
        Pipeline::Multiscale => {
            let low = load_model(require(&cfg.model.lowpass, "lowpass")?)?;
            (low, build_pyramid(&noisy, cfg.model.depth)?.lowpass)
        }
        Pipeline::Oracle => {
            return Err(Error::Config(
                "jacobian needs a trained model (pixel or multiscale low-pass)".into(),
            ))
        }
    };
    let (_, h, w) = image.dims3()?;
    let coord = (0, row.unwrap_or(h / 2), col.unwrap_or(w / 2));
    let filter: Tensor<f64> = jacobian_row(&model, &image.cast::<f32>(), coord)?.cast();
    let png = output_file(cfg, "jacobian.png")?;
    export_heatmap(&filter, &png)?;
    let csv = output_file(cfg, "jacobian.csv")?;
    write_with(&csv, |out| {
        for r in 0..h {
            let line: Vec<String> = (0..w)
                .map(|c| format!("{:e}", filter.data()[r * w + c]))
                .collect();
            writeln!(out, "{}", line.join(","))?;
        }
        Ok(())
    })?;
    let nz: Vec<(usize, usize)> = (0..h * w)
        .filter(|&i| filter.data()[i] != 0.0)
        .map(|i| (i / w, i % w))
        .collect();
    let extent = |f: fn(&(usize, usize)) -> usize| {
        let lo = nz.iter().map(f).min().unwrap_or(0);
        let hi = nz.iter().map(f).max().unwrap_or(0);
        if nz.is_empty() { 0 } else { hi - lo + 1 }
    };
    println!(
        "wrote {} and {}; support {}×{} within receptive field {}",
        png.display(),
        csv.display(),
        extent(|p| p.0),
        extent(|p| p.1),
        model.receptive_field()
    );
    Ok(())
}

fn oracle_check(cfg: &ExperimentConfig, trials: usize) -> Result<()> {
    let g = cfg.oracle()?;
    let side = g.side();
    let mut failures = 0;
    let mut report = |name: &str, value: f64, tol: f64| {
        let ok = value < tol;
        if !ok {
            failures += 1;
        }
        println!("{} {name}: {value:.3e} (tolerance {tol:.0e})", if ok { "PASS" } else { "FAIL" });
    };

    let mut miyasawa = 0.0f64;
    let mut decomposition = 0.0f64;
    for t in 0..trials as u64 {
        let seed = derive_seed(cfg.experiment.seed, t);
        let x = g.sample_exact(seed)?;
        let sigma = 0.05 + 0.9 * (t as f64 + 0.5) / trials.max(1) as f64;
        let y = corrupt(&x, sigma, seed ^ 1)?;
        let wiener = g.wiener_denoise(&y, sigma)?;
        let score = g.analytic_score(&y, sigma)?;
        let tweedie = y.zip_map(&score, |a, s| a + sigma * sigma * s)?;
        miyasawa = miyasawa.max(wiener.sub(&tweedie)?.max_abs());
        if side % (1 << cfg.model.depth) == 0 {
            let d = mse_decomposition_check(&x, &wiener, cfg.model.depth)?;
            decomposition = decomposition.max(d.gap);
        }
    }
    report("denoiser equals input plus σ² times score", miyasawa, 1e-12);
    report("wavelet MSE decomposition gap", decomposition, 1e-10);

    if let Basis::Haar { depth } = g.basis() {
        let mut gap = 0.0f64;
        for t in 0..trials as u64 {
            let seed = derive_seed(cfg.experiment.seed ^ 0xA5, t);
            let sigma = 0.05 + 0.9 * (t as f64 + 0.5) / trials.max(1) as f64;
            let y = corrupt(&g.sample_exact(seed)?, sigma, seed ^ 1)?;
            let marginal = g.lowpass_marginal(depth)?;
            let conds = (1..=depth)
                .map(|j| g.conditional_detail_denoiser(j, NoiseLevel::Known(sigma)))
                .collect::<Result<Vec<_>>>()?;
            let ms = multiscale_denoise(&y, &marginal.denoiser(NoiseLevel::Known(sigma)), &conds, depth)?;
            gap = gap.max(ms.image.sub(&g.wiener_denoise(&y, sigma)?)?.max_abs());
        }
        report("multi-scale oracle equals global Wiener filter", gap, 1e-10);
    } else {
        println!("SKIP multi-scale equivalence (basis {} is not haar)", g.basis());
    }

    if failures > 0 {
        return Err(Error::Invariant(format!("{failures} oracle identities failed")));
    }
    Ok(())
}
