use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use upfit::body_model::{load_model, mini, BodyModel};
use upfit::direct_predict::load_dp_model;
use upfit::fitting::{build_ratio_table, FitConfig, RatioTable};
use upfit::labelgen::PartReductionMap;
use upfit::pipeline::{
    cmd_dp_predict, cmd_dp_train, cmd_eval, cmd_fit, cmd_labelgen, cmd_loop_iterate, write_synthetic_dataset,
    DpTrainConfig, EvalOptions, FitJob, SampleError, Status, SyntheticDataset,
};
use upfit::review::{ReviewConfig, ReviewService};

#[derive(Parser)]
#[command(name = "upfit", version, about = "Body model fitting, label generation and fit curation")]
struct Cli {
    /// Body model file; the built-in mini model when omitted.
    #[arg(long, global = true)]
    model: Option<PathBuf>,
    /// Worker threads; all cores when omitted.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Exit with 0 even when some samples failed.
    #[arg(long, global = true)]
    tolerate_errors: bool,
    /// Also write the command's report as JSON to this file.
    #[arg(long, global = true)]
    report: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Fit every sample that has no accepted fit and whose inputs changed.
    Fit(FitArgs),
    /// Refit rejected samples from their predicted landmarks.
    Loop(LoopArgs),
    /// Write label bundles for fitted samples.
    Labelgen(LabelgenArgs),
    /// Train a direct-prediction model on synthetic renders.
    DpTrain(DpTrainArgs),
    /// Predict body configurations from surface landmarks.
    DpPredict(DpPredictArgs),
    /// Score fits against ground truth.
    Eval(EvalArgs),
    /// Run the review service.
    Serve(ServeArgs),
    /// Build the person-size ratio table.
    RatioTable(RatioTableArgs),
    /// Write a synthetic dataset with ground truth.
    SynthDataset(SynthArgs),
}

#[derive(Args)]
struct FitOpts {
    #[arg(long)]
    manifest: PathBuf,
    /// Fit configuration (JSON); defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Ratio table (JSON); built from the model when omitted.
    #[arg(long)]
    ratio_table: Option<PathBuf>,
}

#[derive(Args)]
struct FitArgs {
    #[command(flatten)]
    fit: FitOpts,
}

#[derive(Args)]
struct LoopArgs {
    #[command(flatten)]
    fit: FitOpts,
    /// Part reduction map; the mini model's map when omitted.
    #[arg(long)]
    map: Option<PathBuf>,
}

#[derive(Args)]
struct LabelgenArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    map: Option<PathBuf>,
    /// Only samples with this status (unreviewed, accepted, rejected).
    #[arg(long, value_parser = parse_status)]
    status: Option<Status>,
}

#[derive(Args)]
struct DpTrainArgs {
    /// Training configuration (JSON); defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Model file to write.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DpPredictArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Direct-prediction model file.
    #[arg(long)]
    dp: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Global rotation refinement steps after prediction; 0 disables.
    #[arg(long, default_value_t = 10)]
    refine_steps: usize,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Evaluation options (JSON); defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    map: Option<PathBuf>,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Rendered asset directory; `review-cache` beside the manifest when omitted.
    #[arg(long)]
    asset_cache: Option<PathBuf>,
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    #[arg(long, default_value_t = 8080)]
    port: u16,
    /// Seconds an item stays leased to an annotator.
    #[arg(long, default_value_t = 300)]
    lease_ttl: u64,
}

#[derive(Args)]
struct RatioTableArgs {
    #[arg(long)]
    out: PathBuf,
    /// Random bodies sampled.
    #[arg(long, default_value_t = 2000)]
    samples: usize,
}

#[derive(Args)]
struct SynthArgs {
    /// Directory to write into.
    #[arg(long)]
    out: PathBuf,
    /// Dataset recipe (JSON); defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Number of samples, overriding the recipe.
    #[arg(long)]
    n: Option<usize>,
    /// Keypoint noise in pixels, overriding the recipe.
    #[arg(long)]
    noise_px: Option<f64>,
}

fn parse_status(s: &str) -> Result<Status, String> {
    Status::parse(s).ok_or_else(|| format!("unknown status {s:?}"))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn load_map(path: Option<&Path>) -> Result<PartReductionMap> {
    Ok(match path {
        Some(p) => PartReductionMap::load(p)?,
        None => PartReductionMap::mini(),
    })
}

fn load_table(path: Option<&Path>, model: &BodyModel, seed: u64) -> Result<RatioTable> {
    Ok(match path {
        Some(p) => RatioTable::load(p)?,
        None => {
            log::info!("building a ratio table from 2000 random bodies");
            build_ratio_table(model, 2000, seed)?
        }
    })
}

struct Ctx<'a> {
    report: Option<&'a Path>,
}

impl Ctx<'_> {
    /// Prints the table, writes the JSON report and returns the error count.
    fn finish<R: Serialize>(&self, table: &str, report: &R, errors: &[SampleError]) -> Result<usize> {
        print!("{table}");
        if let Some(p) = self.report {
            let mut text = serde_json::to_string_pretty(report)?;
            text.push('\n');
            upfit::util::write_atomic(p, text.as_bytes()).with_context(|| format!("writing {}", p.display()))?;
        }
        for e in errors {
            log::error!("{}: {}", e.id, e.message);
        }
        Ok(errors.len())
    }
}

fn list(label: &str, ids: &[String]) -> String {
    if ids.is_empty() {
        String::new()
    } else {
        format!("{label} ({}): {}\n", ids.len(), ids.join(" "))
    }
}

fn run(cli: Cli) -> Result<usize> {
    let model: &BodyModel = match &cli.model {
        Some(p) => Box::leak(Box::new(load_model(p).with_context(|| format!("loading model {}", p.display()))?)),
        None => mini(),
    };
    let ctx = Ctx { report: cli.report.as_deref() };
    match cli.cmd {
        Cmd::Fit(a) => {
            let cfg = a.fit.config.as_deref().map(FitConfig::load).transpose()?.unwrap_or_default();
            let table = load_table(a.fit.ratio_table.as_deref(), model, cli.seed)?;
            let job = FitJob { model, config: &cfg, table: &table, jobs: cli.jobs };
            let r = cmd_fit(&a.fit.manifest, &job)?;
            let table = format!(
                "{}{}{}manifest {}\n",
                list("fitted", &r.fitted),
                list("skipped (unchanged)", &r.skipped),
                list("accepted (kept)", &r.accepted),
                if r.manifest_written { "updated" } else { "unchanged" }
            );
            ctx.finish(&table, &r, &r.errors)
        }
        Cmd::Loop(a) => {
            let cfg = a.fit.config.as_deref().map(FitConfig::load).transpose()?.unwrap_or_default();
            let table = load_table(a.fit.ratio_table.as_deref(), model, cli.seed)?;
            let map = load_map(a.map.as_deref())?;
            let job = FitJob { model, config: &cfg, table: &table, jobs: cli.jobs };
            let r = cmd_loop_iterate(&a.fit.manifest, &job, &map)?;
            ctx.finish(&r.to_table(), &r, &r.errors)
        }
        Cmd::Labelgen(a) => {
            let map = load_map(a.map.as_deref())?;
            let r = cmd_labelgen(&a.manifest, model, &map, &a.out, a.status, cli.jobs)?;
            let table = format!(
                "{}{}{}",
                list("written", &r.written),
                list("unchanged", &r.unchanged),
                list("skipped", &r.skipped)
            );
            ctx.finish(&table, &r, &r.errors)
        }
        Cmd::DpTrain(a) => {
            let cfg = match &a.config {
                Some(p) => DpTrainConfig::load(p)?,
                None => DpTrainConfig::default(),
            };
            let (dp, r) = cmd_dp_train(model, &cfg, cli.seed, &a.out, cli.jobs)?;
            let table = format!(
                "rows {} (dropped {})\nforests {}\nsynthesis {:.1} s, training {:.1} s\ntraining set {}\nwrote {}\n",
                r.rows,
                r.dropped,
                dp.n_forests(),
                r.synthesis_seconds,
                r.training_seconds,
                r.training_hash,
                a.out.display()
            );
            ctx.finish(&table, &r, &[])
        }
        Cmd::DpPredict(a) => {
            let dp = load_dp_model(&a.dp).with_context(|| format!("loading {}", a.dp.display()))?;
            let r = cmd_dp_predict(&a.manifest, model, &dp, &a.out, a.refine_steps, cli.jobs)?;
            let written: Vec<String> = r.written.iter().map(|(id, _)| id.clone()).collect();
            let table = format!("{}{}", list("written", &written), list("skipped (no surface landmarks)", &r.skipped));
            ctx.finish(&table, &r, &r.errors)
        }
        Cmd::Eval(a) => {
            let opts: EvalOptions = a.config.as_deref().map(read_json).transpose()?.unwrap_or_default();
            let map = load_map(a.map.as_deref())?;
            let r = cmd_eval(&a.manifest, model, &map, &opts, cli.jobs)?;
            ctx.finish(&r.to_table(), &r, &r.errors)
        }
        Cmd::Serve(a) => {
            let cache = a.asset_cache.unwrap_or_else(|| a.manifest.with_file_name("review-cache"));
            let cfg = ReviewConfig {
                lease_ttl: std::time::Duration::from_secs(a.lease_ttl),
                jobs: cli.jobs,
                ..ReviewConfig::new(&a.manifest, cache)
            };
            let svc = ReviewService::open(&cfg, model)?;
            let stats = svc.stats();
            log::info!(
                "{} items ({} unreviewed, {} accepted, {} rejected); verdicts in {}",
                svc.n_items(),
                stats.unreviewed,
                stats.accepted,
                stats.rejected,
                svc.log_path().display()
            );
            let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
            rt.block_on(async {
                let listener = tokio::net::TcpListener::bind((a.host.as_str(), a.port))
                    .await
                    .with_context(|| format!("binding {}:{}", a.host, a.port))?;
                log::info!("listening on http://{}", listener.local_addr()?);
                svc.serve(listener, async {
                    let _ = tokio::signal::ctrl_c().await;
                })
                .await?;
                anyhow::Ok(())
            })?;
            Ok(0)
        }
        Cmd::RatioTable(a) => {
            if a.samples < 100 {
                bail!("--samples must be at least 100");
            }
            let table = build_ratio_table(model, a.samples, cli.seed)?;
            table.save(&a.out)?;
            ctx.finish(&format!("wrote {}\n", a.out.display()), &table, &[])
        }
        Cmd::SynthDataset(a) => {
            let mut spec: SyntheticDataset = a.config.as_deref().map(read_json).transpose()?.unwrap_or_default();
            spec.seed = cli.seed;
            if let Some(n) = a.n {
                spec.n = n;
            }
            if let Some(noise) = a.noise_px {
                spec.noise_px = noise;
            }
            let (path, samples) = write_synthetic_dataset(&a.out, model, &spec)?;
            let ids: Vec<String> = samples.iter().map(|s| s.id.clone()).collect();
            ctx.finish(&format!("{}manifest {}\n", list("samples", &ids), path.display()), &spec, &[])
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let tolerate = cli.tolerate_errors;
    match run(cli) {
        Ok(0) => ExitCode::SUCCESS,
        Ok(n) if tolerate => {
            log::warn!("{n} samples failed");
            ExitCode::SUCCESS
        }
        Ok(n) => {
            log::error!("{n} samples failed; pass --tolerate-errors to exit with 0");
            ExitCode::from(2)
        }
        Err(e) => {
            log::error!("{e:#}");
            ExitCode::FAILURE
        }
    }
}
