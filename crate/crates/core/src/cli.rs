//! Command-line surface.
//!
//! Exit codes: 0 on success, 1 on runtime errors, 2 on usage or config errors.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::alignment::{build_sliding_pairs, train_alignment, Direction};
use crate::classpair::{classify_series, write_assignment_csv, write_histograms_csv};
use crate::convert::{
    eval_forecast, forecast, image_to_series, series_to_image_with_stats, stylize, TileOutpainter,
};
use crate::error::{Error, Result};
use crate::io::checkpoint::{
    bundle_from_checkpoint, bundle_to_checkpoint, load_checkpoint, model_from_checkpoint, model_to_checkpoint,
    save_checkpoint,
};
use crate::io::config::RunConfig;
use crate::io::pnm::{load_image, save_image};
use crate::io::series_csv::{load_series_csv, write_loss_csv, write_series_csv};
use crate::io::write_atomic;
use crate::pipeline::{
    classification_pipeline, forecast_series, heldout_corpus, synchronized_stream, test_benchmark, train_benchmark,
    training_corpus, PLANTED,
};
use crate::tokenize::{Image, NormStats, TimeSeries};
use crate::training::{run_warmup, TokenizerBundle, UTILIZATION_WINDOW};
use crate::selftest;

const BUNDLE_FILE: &str = "bundle.tart";
const ALIGN_FORECAST_FILE: &str = "align_forecast.tart";
const ALIGN_CLASSIFY_FILE: &str = "align_classify.tart";

#[derive(Parser, Debug)]
#[command(name = "timeartist", version, about = "Temporal-visual conversion through a shared codebook")]
struct Cli {
    /// key = value run configuration; defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory for every artifact read or written.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
struct SeriesInput {
    /// Numeric CSV; each column is cut into windows of the series length.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Use only this zero-based column.
    #[arg(long)]
    column: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the synthetic warmup corpus and labelled benchmark.
    SynthData,
    /// Train and freeze the tokenizer bundle.
    Warmup {
        #[command(flatten)]
        series: SeriesInput,
        /// Directory of PGM/PPM images.
        #[arg(long)]
        images: Option<PathBuf>,
    },
    /// Train the temporal-to-visual model on sliding-window pairs.
    AlignForecast,
    /// Pair benchmark classes by histogram distance and train on the pairs.
    AlignClassify,
    /// Render series as images, or an image back into a series.
    Convert {
        #[command(flatten)]
        series: SeriesInput,
        #[arg(long)]
        image: Option<PathBuf>,
    },
    /// Outpainting forecast with the tiling outpainter.
    Forecast {
        #[command(flatten)]
        series: SeriesInput,
    },
    /// Classify held-out benchmark series through the aligned image.
    Classify,
    /// Fuse a series into an image in the latent space.
    Stylize {
        #[command(flatten)]
        series: SeriesInput,
        #[arg(long)]
        image: Option<PathBuf>,
    },
    /// Summarize artifacts in the output directory.
    Report,
    /// Run the oracle suites.
    Selftest,
}

struct Ctx {
    cfg: RunConfig,
    out: PathBuf,
}

impl Ctx {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn bundle(&self) -> Result<TokenizerBundle> {
        bundle_from_checkpoint(&load_checkpoint(&self.path(BUNDLE_FILE))?)
    }
}

pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli) {
        Ok(summary) => {
            println!("{summary}");
            0
        }
        Err(e @ Error::Config(_)) => {
            eprintln!("error: {e}");
            2
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn execute(cli: Cli) -> Result<String> {
    let mut cfg = match &cli.config {
        Some(path) if !path.exists() => return Err(Error::Config(format!("no config file at {}", path.display()))),
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let ctx = Ctx { cfg, out: cli.out };
    if !matches!(cli.command, Command::Report | Command::Selftest) {
        std::fs::create_dir_all(&ctx.out)?;
    }
    match cli.command {
        Command::SynthData => synth_data(&ctx),
        Command::Warmup { series, images } => warmup(&ctx, &series, images.as_deref()),
        Command::AlignForecast => align_forecast(&ctx),
        Command::AlignClassify => align_classify(&ctx),
        Command::Convert { series, image } => convert(&ctx, &series, image.as_deref()),
        Command::Forecast { series } => run_forecast(&ctx, &series),
        Command::Classify => classify(&ctx),
        Command::Stylize { series, image } => run_stylize(&ctx, &series, image.as_deref()),
        Command::Report => report(&ctx),
        Command::Selftest => run_selftest(&ctx),
    }
}

fn write_file(path: &Path, write: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<()> {
    let mut buf = Vec::new();
    write(&mut buf)?;
    write_atomic(path, &buf)
}

/// Non-overlapping windows of length `len` from every requested column.
fn windows(input: &SeriesInput, len: usize) -> Result<Option<Vec<TimeSeries>>> {
    let Some(path) = &input.input else {
        return Ok(None);
    };
    let mut out = Vec::new();
    for s in load_series_csv(path, input.column)? {
        if s.len() < len {
            return Err(Error::LengthMismatch(s.len(), len));
        }
        for chunk in s.values.chunks_exact(len) {
            out.push(TimeSeries::new(chunk.to_vec())?);
        }
    }
    Ok(Some(out))
}

fn load_image_dir(dir: &Path) -> Result<Vec<Image>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    paths.retain(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("pgm" | "ppm")));
    paths.sort();
    paths.iter().map(|p| load_image(p)).collect()
}

fn synth_data(ctx: &Ctx) -> Result<String> {
    let bc = ctx.cfg.bundle_config();
    let data = ctx.path("data");
    let corpus = training_corpus(&bc, ctx.cfg.seed);
    std::fs::create_dir_all(data.join("images"))?;
    std::fs::create_dir_all(data.join("class_images"))?;
    write_file(&data.join("series.csv"), |b| write_series_csv(b, &corpus.series))?;
    for (i, img) in corpus.images.iter().enumerate() {
        save_image(img, &data.join("images").join(format!("img_{i:04}.pgm")))?;
    }
    let bench = train_benchmark(&bc, ctx.cfg.seed);
    let series: Vec<TimeSeries> = bench.series.iter().map(|(s, _)| s.clone()).collect();
    write_file(&data.join("class_series.csv"), |b| write_series_csv(b, &series))?;
    write_file(&data.join("class_labels.csv"), |b| {
        let mut w = csv::Writer::from_writer(b);
        w.write_record(["column", "class"]).map_err(csv_err)?;
        for (i, (_, c)) in bench.series.iter().enumerate() {
            w.write_record([i.to_string(), c.to_string()]).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    })?;
    for (i, (img, k)) in bench.images.iter().enumerate() {
        save_image(img, &data.join("class_images").join(format!("v{k}_{i:03}.pgm")))?;
    }
    Ok(format!(
        "synth-data: {} series, {} images, {} labelled series, {} labelled images -> {}",
        corpus.series.len(),
        corpus.images.len(),
        bench.series.len(),
        bench.images.len(),
        data.display()
    ))
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

fn warmup(ctx: &Ctx, input: &SeriesInput, images: Option<&Path>) -> Result<String> {
    let bc = ctx.cfg.bundle_config();
    let synthetic = training_corpus(&bc, ctx.cfg.seed);
    let series = windows(input, bc.series_len)?.unwrap_or(synthetic.series);
    let images = match images {
        Some(dir) => load_image_dir(dir)?,
        None => synthetic.images,
    };
    let outcome = run_warmup(&series, &images, bc, &ctx.cfg.warmup_config())?;
    let path = ctx.path(BUNDLE_FILE);
    save_checkpoint(&bundle_to_checkpoint(&outcome.bundle), &path)?;
    write_file(&ctx.path("loss.csv"), |b| write_loss_csv(b, &outcome.log))?;
    let log = &outcome.log;
    let first = |parity: usize| log.iter().skip(parity).step_by(2).next().map_or(f64::NAN, |l| l.total);
    let last = |parity: usize| log.iter().skip(parity).step_by(2).next_back().map_or(f64::NAN, |l| l.total);
    let util: Vec<String> = outcome.tail_utilization.iter().map(|u| format!("{u:.2}")).collect();
    Ok(format!(
        "warmup: {} steps, visual {:.4} -> {:.4}, temporal {:.4} -> {:.4}, utilization (last {}) [{}] -> {}",
        log.len(),
        first(0),
        last(0),
        first(1),
        last(1),
        UTILIZATION_WINDOW.min(log.len()),
        util.join(", "),
        path.display()
    ))
}

fn align_forecast(ctx: &Ctx) -> Result<String> {
    let bundle = ctx.bundle()?;
    let (series, image) = synchronized_stream(&bundle, 8, ctx.cfg.seed)?;
    let pairs = build_sliding_pairs(&series, &image, bundle.config.series_len, bundle.config.segment, &bundle)?;
    let outcome = train_alignment(&pairs, &bundle, &ctx.cfg.align_config(Direction::TemporalToVisual))?;
    let path = ctx.path(ALIGN_FORECAST_FILE);
    save_checkpoint(&model_to_checkpoint(&outcome.model), &path)?;
    Ok(format!(
        "align-forecast: {} sliding pairs, cross-entropy {:.4} -> {:.4} -> {}",
        pairs.len(),
        outcome.losses.first().copied().unwrap_or(f64::NAN),
        outcome.losses.last().copied().unwrap_or(f64::NAN),
        path.display()
    ))
}

fn align_classify(ctx: &Ctx) -> Result<String> {
    let bundle = ctx.bundle()?;
    let bench = train_benchmark(&bundle.config, ctx.cfg.seed);
    let (pairing, outcome) =
        classification_pipeline(&bundle, &bench, &ctx.cfg.align_config(Direction::TemporalToVisual))?;
    write_file(&ctx.path("histograms.csv"), |b| {
        write_histograms_csv(b, &pairing.temporal, &pairing.visual)
    })?;
    write_file(&ctx.path("assignment.csv"), |b| {
        write_assignment_csv(b, &pairing.assignment, &pairing.cost)
    })?;
    let path = ctx.path(ALIGN_CLASSIFY_FILE);
    save_checkpoint(&model_to_checkpoint(&outcome.model), &path)?;
    Ok(format!(
        "align-classify: mapping {:?} (planted {:?}), cost {:.4}, cross-entropy {:.4} -> {}",
        pairing.assignment.mapping,
        PLANTED,
        pairing.assignment.cost,
        outcome.losses.last().copied().unwrap_or(f64::NAN),
        path.display()
    ))
}

fn convert(ctx: &Ctx, input: &SeriesInput, image: Option<&Path>) -> Result<String> {
    let bundle = ctx.bundle()?;
    let dir = ctx.path("convert");
    std::fs::create_dir_all(&dir)?;
    if let Some(path) = image {
        let img = load_image(path)?;
        let stats = NormStats { mean: 0.0, std: 1.0 };
        let series = image_to_series(&img, &bundle, &stats)?;
        let target = dir.join("image_series.csv");
        write_file(&target, |b| write_series_csv(b, std::slice::from_ref(&series)))?;
        return Ok(format!("convert: image -> series of length {} -> {}", series.len(), target.display()));
    }
    let series = match windows(input, bundle.config.series_len)? {
        Some(s) => s,
        None => heldout_corpus(&bundle.config, ctx.cfg.seed).series,
    };
    let mut ratio = 0.0;
    for (i, x) in series.iter().enumerate() {
        let (img, stats) = series_to_image_with_stats(x, &bundle)?;
        save_image(&img, &dir.join(format!("series_{i:04}.pgm")))?;
        let back = image_to_series(&img, &bundle, &stats)?;
        let var = x.variance();
        let (mse, _) = eval_forecast(&back.values, &x.values)?;
        ratio += if var > 0.0 { mse / var } else { mse };
    }
    Ok(format!(
        "convert: {} series -> images, mean round-trip mse/var {:.4} -> {}",
        series.len(),
        ratio / series.len().max(1) as f64,
        dir.display()
    ))
}

fn run_forecast(ctx: &Ctx, input: &SeriesInput) -> Result<String> {
    let bundle = ctx.bundle()?;
    let fc = ctx.cfg.forecast_config();
    let (ctx_len, horizon) = (fc.context_length, fc.horizon);
    let (dataset, series) = match &input.input {
        Some(path) => (
            path.file_stem().map_or("input".into(), |s| s.to_string_lossy().into_owned()),
            load_series_csv(path, input.column)?,
        ),
        None => ("synthetic".to_string(), forecast_series(ctx_len + horizon, 16, ctx.cfg.seed)),
    };
    let mut preds = Vec::new();
    let (mut mse, mut mae, mut scored) = (0.0, 0.0, 0);
    for s in &series {
        if s.len() < ctx_len {
            return Err(Error::LengthMismatch(s.len(), ctx_len));
        }
        let obs = TimeSeries::new(s.values[..ctx_len].to_vec())?;
        let pred = forecast(&obs, &fc, &bundle, &TileOutpainter)?;
        if s.len() >= ctx_len + horizon {
            let (a, b) = eval_forecast(&pred.values, &s.values[ctx_len..ctx_len + horizon])?;
            mse += a;
            mae += b;
            scored += 1;
        }
        preds.push(pred);
    }
    write_file(&ctx.path("forecast.csv"), |b| write_series_csv(b, &preds))?;
    let n = scored.max(1) as f64;
    write_file(&ctx.path("forecast_report.csv"), |b| {
        let mut w = csv::Writer::from_writer(b);
        w.write_record(["dataset", "horizon", "mse", "mae"]).map_err(csv_err)?;
        if scored > 0 {
            w.write_record([dataset.clone(), horizon.to_string(), format!("{:?}", mse / n), format!("{:?}", mae / n)])
                .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    })?;
    if scored == 0 {
        return Ok(format!("forecast: {} series, horizon {horizon}, no ground truth to score", preds.len()));
    }
    Ok(format!(
        "forecast: {} series, horizon {horizon}, mse {:.4}, mae {:.4} -> {}",
        preds.len(),
        mse / n,
        mae / n,
        ctx.path("forecast.csv").display()
    ))
}

fn classify(ctx: &Ctx) -> Result<String> {
    let bundle = ctx.bundle()?;
    let model = model_from_checkpoint(&load_checkpoint(&ctx.path(ALIGN_CLASSIFY_FILE))?)?;
    let refs = train_benchmark(&bundle.config, ctx.cfg.seed).images_by_class();
    let test = test_benchmark(&bundle.config, ctx.cfg.seed);
    let mut rows = Vec::new();
    let mut correct = 0;
    for (x, c) in &test.series {
        let predicted = classify_series(x, &model, &bundle, &refs)?;
        correct += usize::from(predicted == PLANTED[*c]);
        rows.push((*c, predicted));
    }
    write_file(&ctx.path("predictions.csv"), |b| {
        let mut w = csv::Writer::from_writer(b);
        w.write_record(["index", "series_class", "expected_visual", "predicted_visual"])
            .map_err(csv_err)?;
        for (i, (c, p)) in rows.iter().enumerate() {
            w.write_record([i.to_string(), c.to_string(), PLANTED[*c].to_string(), p.to_string()])
                .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    })?;
    Ok(format!(
        "classify: {correct}/{} correct (accuracy {:.3}) -> {}",
        rows.len(),
        correct as f64 / rows.len().max(1) as f64,
        ctx.path("predictions.csv").display()
    ))
}

fn run_stylize(ctx: &Ctx, input: &SeriesInput, image: Option<&Path>) -> Result<String> {
    let bundle = ctx.bundle()?;
    let synthetic = heldout_corpus(&bundle.config, ctx.cfg.seed);
    let img = match image {
        Some(p) => load_image(p)?,
        None => synthetic.images[0].clone(),
    };
    let x = match windows(input, bundle.config.series_len)? {
        Some(s) => s.into_iter().next().ok_or(Error::EmptyCorpus)?,
        None => synthetic.series[0].clone(),
    };
    let styled = stylize(&img, &x, &bundle)?;
    let path = ctx.path("stylized.pgm");
    save_image(&styled, &path)?;
    Ok(format!("stylize: {}x{} image -> {}", styled.height, styled.width, path.display()))
}

fn read_records(path: &Path) -> Result<Option<Vec<csv::StringRecord>>> {
    if !path.exists() {
        return Ok(None);
    }
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    Ok(Some(r.records().collect::<std::result::Result<_, _>>().map_err(csv_err)?))
}

fn report(ctx: &Ctx) -> Result<String> {
    if !ctx.out.is_dir() {
        return Err(Error::InvalidArgument(format!("no output directory at {}", ctx.out.display())));
    }
    let mut parts = Vec::new();
    if ctx.path(BUNDLE_FILE).exists() {
        let b = ctx.bundle()?;
        parts.push(format!(
            "bundle N={} D={} M={} K={} frozen={}",
            b.config.tokens(),
            b.config.dim,
            b.config.heads,
            b.config.codes,
            b.frozen
        ));
    }
    if let Some(rows) = read_records(&ctx.path("loss.csv"))? {
        let last_total = |modality: &str| {
            rows.iter()
                .rev()
                .find(|r| r.get(1) == Some(modality))
                .and_then(|r| r.get(5))
                .unwrap_or("n/a")
                .to_string()
        };
        parts.push(format!(
            "final loss visual {} temporal {}",
            last_total("visual"),
            last_total("temporal")
        ));
    }
    if let Some(rows) = read_records(&ctx.path("forecast_report.csv"))? {
        for r in rows {
            parts.push(format!(
                "forecast {} h={} mse {} mae {}",
                &r[0], &r[1], &r[2], &r[3]
            ));
        }
    }
    if let Some(rows) = read_records(&ctx.path("predictions.csv"))? {
        let correct = rows.iter().filter(|r| r.get(2) == r.get(3)).count();
        parts.push(format!("classify {correct}/{}", rows.len()));
    }
    if parts.is_empty() {
        parts.push("no artifacts".into());
    }
    Ok(format!("report: {}", parts.join("; ")))
}

fn run_selftest(ctx: &Ctx) -> Result<String> {
    let checks = selftest::run_all(ctx.cfg.seed);
    let failed: Vec<&selftest::Check> = checks.iter().filter(|c| !c.passed).collect();
    for c in &checks {
        eprintln!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    if failed.is_empty() {
        Ok(format!("selftest: {}/{} checks passed", checks.len(), checks.len()))
    } else {
        let names: Vec<&str> = failed.iter().map(|c| c.name).collect();
        Err(Error::InvalidArgument(format!(
            "selftest: {} of {} checks failed: {}",
            failed.len(),
            checks.len(),
            names.join(", ")
        )))
    }
}
