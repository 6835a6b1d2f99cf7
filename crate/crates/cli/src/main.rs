mod manifest;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use reshuffle_core::decoder::from_binding;
use reshuffle_core::patchmatch::MatchConfig;
use reshuffle_core::pipeline::{run_pipeline_with, PipelineOptions};
use reshuffle_core::selfcheck::{run_selfcheck, Fault};
use reshuffle_core::study::{parse_sweep, to_csv, usage_study};
use reshuffle_core::{
    content_loss, global_style_loss, load_tensor, nnc_search, optimize_layer, recompute_usage,
    reshuffle_loss, save_tensor, DecoderBinding, Error, ExternalDecoder, FeaturePyramid,
    LossReport, PipelineConfig, UsageMode,
};
use serde_json::json;

use crate::manifest::{read_config, Inputs, Outputs, RunManifest, Timings};

#[derive(Parser)]
#[command(name = "reshuffle", version, about = "Feature reshuffling style transfer engine")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print content, global style, local style and reshuffle losses as JSON.
    Losses {
        /// Feature map being evaluated.
        target: PathBuf,
        /// Style feature map.
        source: PathBuf,
        /// Content feature map for the content loss (defaults to SOURCE).
        #[arg(long)]
        content: Option<PathBuf>,
        #[command(flatten)]
        tuning: Tuning,
    },
    /// Compute a usage-penalized nearest-neighbor field from TARGET into SOURCE.
    Match {
        target: PathBuf,
        source: PathBuf,
        /// Output path for the (2, rows, cols) int64 field.
        #[arg(long)]
        field_out: PathBuf,
        /// Output path for the (h, w) float32 usage map.
        #[arg(long)]
        usage_out: Option<PathBuf>,
        /// Check field validity and usage bookkeeping; with `--strict 1` on
        /// equal-size inputs also require a bijection.
        #[arg(long)]
        verify: bool,
        #[command(flatten)]
        tuning: Tuning,
    },
    /// Run the EM loop on a single layer.
    OptimizeLayer {
        content: PathBuf,
        style: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        field_out: Option<PathBuf>,
        #[command(flatten)]
        tuning: Tuning,
    },
    /// Run the coarse-to-fine pipeline over layers 4, 3 and 2.
    Pipeline {
        /// Content pyramid manifest.
        content: PathBuf,
        /// Style pyramid manifest.
        style: PathBuf,
        /// Output path for the layer-2 features.
        #[arg(long)]
        out: PathBuf,
        /// Run manifest path (defaults to OUT with a .json extension).
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Directory for per-layer outputs, fields and decoded features.
        #[arg(long)]
        artifacts: Option<PathBuf>,
        #[command(flatten)]
        tuning: Tuning,
    },
    /// Sweep the maximum usage count and write a CSV of content and global style losses.
    UsageStudy {
        content: PathBuf,
        style: PathBuf,
        /// Comma-separated caps; `inf` for unlimited.
        #[arg(long, default_value = "1,2,3,inf")]
        sweep: String,
        /// CSV output path (standard output when omitted).
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        tuning: Tuning,
    },
    /// Run the built-in property suite and print a JSON report.
    Selfcheck {
        #[arg(long, hide = true, value_enum, default_value = "none")]
        inject_fault: FaultArg,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum FaultArg {
    None,
    FlipLambdaSign,
}

#[derive(Args, Clone, Default)]
struct Tuning {
    /// JSON config or run manifest; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Layer whose settings single-layer commands use.
    #[arg(long, default_value_t = 2)]
    layer: u8,
    /// Odd patch size; for `pipeline` it applies to every layer.
    #[arg(long)]
    patch_size: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    alpha: Option<f32>,
    #[arg(long)]
    beta: Option<f32>,
    #[arg(long)]
    em_iters: Option<usize>,
    /// Normalize losses by map size (implied when the two maps differ in size).
    #[arg(long)]
    normalized: bool,
    /// Hard cap on how many target patches may use one source pixel.
    #[arg(long, value_name = "N")]
    strict: Option<u32>,
    /// Score usage against a snapshot taken at the start of each pass.
    #[arg(long)]
    frozen: bool,
    /// Replace random search with a scan of every source center.
    #[arg(long)]
    exhaustive: bool,
    /// External decoder command template with {in}, {out}, {from}, {to}.
    #[arg(long)]
    decoder_cmd: Option<String>,
    /// Decode the final features to this PNG with the external decoder.
    #[arg(long)]
    decode_image: Option<PathBuf>,
}

impl Tuning {
    fn pipeline_config(&self) -> Result<PipelineConfig, Failure> {
        let mut cfg = match &self.config {
            Some(path) => read_config(path).map_err(Failure::Input)?,
            None => PipelineConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.matching.seed = seed;
        }
        if let Some(r) = self.patch_size {
            for size in cfg.patch_sizes.values_mut() {
                *size = r;
            }
            cfg.patch_sizes.insert(self.layer, r);
        }
        if let Some(v) = self.lambda {
            cfg.lambda = v;
        }
        if let Some(v) = self.alpha {
            cfg.alpha = v;
        }
        if let Some(v) = self.beta {
            cfg.beta = v;
        }
        if let Some(v) = self.em_iters {
            cfg.em_iterations = v;
        }
        if let Some(n) = self.strict {
            cfg.matching.max_usage = Some(n);
        }
        if self.frozen {
            cfg.matching.usage_mode = UsageMode::Frozen;
        }
        if self.exhaustive {
            cfg.matching.exhaustive_random_search = true;
        }
        if let Some(cmd) = &self.decoder_cmd {
            let timeout_secs = match &cfg.decoder {
                DecoderBinding::ExternalCommand { timeout_secs, .. } => *timeout_secs,
                DecoderBinding::BuiltinTest => 600,
            };
            cfg.decoder = DecoderBinding::ExternalCommand {
                command_template: cmd.clone(),
                timeout_secs,
            };
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Matching parameters for the selected layer, with the seed used as is.
    fn match_config(&self, cfg: &PipelineConfig) -> Result<MatchConfig, Failure> {
        let m = MatchConfig {
            lambda: cfg.lambda,
            geom: cfg.geom(self.layer)?,
            ..cfg.matching.clone()
        };
        m.validate()?;
        Ok(m)
    }
}

enum Failure {
    Property(String),
    Infeasible(String),
    Input(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Infeasible(_) => Failure::Infeasible(e.to_string()),
            other => Failure::Input(other.to_string()),
        }
    }
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Failure::Property(_) => 1,
            Failure::Infeasible(_) => 2,
            Failure::Input(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Property(m) | Failure::Infeasible(m) | Failure::Input(m) => m,
        }
    }
}

fn print_json(value: &impl serde::Serialize) {
    println!("{}", serde_json::to_string_pretty(value).expect("serializable"));
}

fn write_text(path: &Path, text: &str) -> Result<(), Failure> {
    fs::write(path, text).map_err(|e| Failure::Input(format!("cannot write {}: {e}", path.display())))
}

fn cmd_losses(target: &Path, source: &Path, content: Option<&Path>, tuning: &Tuning) -> Result<(), Failure> {
    let cfg = tuning.pipeline_config()?;
    let output = load_tensor(target)?;
    let style = load_tensor(source)?;
    let content = match content {
        Some(path) => load_tensor(path)?,
        None => style.clone(),
    };
    let (field, _) = nnc_search(&output, &style, &tuning.match_config(&cfg)?)?;
    let normalized = tuning.normalized || output.shape() != style.shape();
    print_json(&LossReport::evaluate(&output, &content, &style, &field, normalized)?);
    Ok(())
}

fn cmd_match(
    target: &Path,
    source: &Path,
    field_out: &Path,
    usage_out: Option<&Path>,
    verify: bool,
    tuning: &Tuning,
) -> Result<(), Failure> {
    let cfg = tuning.pipeline_config()?;
    let output = load_tensor(target)?;
    let style = load_tensor(source)?;
    let mcfg = tuning.match_config(&cfg)?;
    let (field, usage) = nnc_search(&output, &style, &mcfg)?;
    field.to_npy().write(field_out)?;
    if let Some(path) = usage_out {
        usage.to_npy().write(path)?;
    }

    let (sh, sw) = (style.height(), style.width());
    let bijection = field.is_bijection(sh, sw);
    print_json(&json!({
        "centers": field.len(),
        "max_multiplicity": field.max_multiplicity(sh, sw),
        "bijection": bijection,
        "usage_total": usage.total(),
    }));
    if verify {
        field.validate((output.height(), output.width()), (sh, sw)).map_err(|e| Failure::Property(e.to_string()))?;
        if usage != recompute_usage(&field, sh, sw) {
            return Err(Failure::Property("usage map disagrees with the field".into()));
        }
        if let Some(cap) = mcfg.max_usage {
            let worst = field.max_multiplicity(sh, sw);
            if worst > cap as usize {
                return Err(Failure::Property(format!("a source center is used {worst} times, cap is {cap}")));
            }
        }
        let equal = mcfg.geom.valid_center_count(output.height(), output.width())
            == mcfg.geom.valid_center_count(sh, sw);
        if mcfg.max_usage == Some(1) && equal && !bijection {
            return Err(Failure::Property("strict field is not a permutation".into()));
        }
    }
    Ok(())
}

fn cmd_optimize_layer(
    content: &Path,
    style: &Path,
    out: &Path,
    field_out: Option<&Path>,
    tuning: &Tuning,
) -> Result<(), Failure> {
    let cfg = tuning.pipeline_config()?;
    let content = load_tensor(content)?;
    let style = load_tensor(style)?;
    let started = Instant::now();
    let (output, field) = optimize_layer(&content, &style, tuning.layer, &cfg)?;
    let seconds = started.elapsed().as_secs_f64();
    save_tensor(&output, out)?;
    if let Some(path) = field_out {
        field.to_npy().write(path)?;
    }
    // The unnormalized global loss is only defined for equal spatial sizes.
    let normalized = tuning.normalized || output.shape() != style.shape();
    print_json(&json!({
        "layer": tuning.layer,
        "seconds": seconds,
        "content": content_loss(&output, &content)?,
        "global_style": global_style_loss(&output, &style, normalized)?,
        "normalization_used": normalized,
        "reshuffle": reshuffle_loss(&output, &style, &field)?,
    }));
    Ok(())
}

fn cmd_pipeline(
    content_path: &Path,
    style_path: &Path,
    out: &Path,
    manifest_path: Option<&Path>,
    artifacts: Option<&Path>,
    tuning: &Tuning,
) -> Result<(), Failure> {
    let total = Instant::now();
    let cfg = tuning.pipeline_config()?;
    let manifest_path = manifest_path.map_or_else(|| out.with_extension("json"), Path::to_path_buf);
    let image_decoder = match (&tuning.decode_image, &cfg.decoder) {
        (None, _) => None,
        (Some(png), DecoderBinding::ExternalCommand { command_template, timeout_secs }) => Some((
            png.clone(),
            ExternalDecoder::new(command_template.clone(), Duration::from_secs(*timeout_secs), work_dir(out, artifacts)),
        )),
        (Some(_), DecoderBinding::BuiltinTest) => {
            return Err(Failure::Input("--decode-image needs an external decoder (--decoder-cmd)".into()))
        }
    };

    let started = Instant::now();
    let content = FeaturePyramid::load(content_path)?;
    let style = FeaturePyramid::load(style_path)?;
    let load_seconds = started.elapsed().as_secs_f64();

    let work = work_dir(out, artifacts);
    if matches!(cfg.decoder, DecoderBinding::ExternalCommand { .. }) {
        fs::create_dir_all(&work).map_err(|e| Failure::Input(format!("cannot create {}: {e}", work.display())))?;
    }
    let decoder = from_binding(&cfg.decoder, &work);
    let options = PipelineOptions {
        artifacts_dir: artifacts.map(Path::to_path_buf),
        report_losses: true,
    };
    let run = run_pipeline_with(&content, &style, &cfg, decoder.as_ref(), &options)?;
    save_tensor(&run.output, out)?;

    let decode_image_seconds = match &image_decoder {
        Some((png, dec)) => {
            let started = Instant::now();
            dec.decode_to_image(&run.output, 2, png)?;
            Some(started.elapsed().as_secs_f64())
        }
        None => None,
    };

    let manifest = RunManifest {
        seed: cfg.matching.seed,
        config: cfg,
        inputs: Inputs {
            content_manifest: content_path.to_path_buf(),
            style_manifest: style_path.to_path_buf(),
            config: tuning.config.clone(),
        },
        outputs: Outputs {
            features: out.to_path_buf(),
            manifest: manifest_path.clone(),
            image: tuning.decode_image.clone(),
            artifacts: run.artifacts,
        },
        timings: Timings {
            load_seconds,
            layers: run.layers,
            decode_image_seconds,
            total_seconds: total.elapsed().as_secs_f64(),
        },
    };
    let text = serde_json::to_string_pretty(&manifest).expect("serializable");
    write_text(&manifest_path, &text)?;
    println!("{text}");
    Ok(())
}

fn work_dir(out: &Path, artifacts: Option<&Path>) -> PathBuf {
    match artifacts {
        Some(dir) => dir.to_path_buf(),
        None => out.parent().unwrap_or(Path::new(".")).join("decoder_work"),
    }
}

fn cmd_usage_study(
    content: &Path,
    style: &Path,
    sweep: &str,
    out: Option<&Path>,
    tuning: &Tuning,
) -> Result<(), Failure> {
    let cfg = tuning.pipeline_config()?;
    let sweep = parse_sweep(sweep).map_err(Failure::Input)?;
    let content = load_tensor(content)?;
    let style = load_tensor(style)?;
    let normalized = tuning.normalized || content.shape() != style.shape();
    let rows = usage_study(&content, &style, tuning.layer, &sweep, &cfg, normalized)?;
    let csv = to_csv(&rows);
    match out {
        Some(path) => write_text(path, &csv),
        None => {
            print!("{csv}");
            Ok(())
        }
    }
}

fn cmd_selfcheck(fault: FaultArg) -> Result<(), Failure> {
    let fault = match fault {
        FaultArg::None => Fault::None,
        FaultArg::FlipLambdaSign => Fault::FlipLambdaSign,
    };
    let report = run_selfcheck(fault);
    print_json(&report);
    if report.passed {
        Ok(())
    } else {
        let names: Vec<_> = report.failures().map(|c| format!("{}: {}", c.name, c.detail)).collect();
        Err(Failure::Property(format!("failed properties: {}", names.join("; "))))
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Losses { target, source, content, tuning } => cmd_losses(&target, &source, content.as_deref(), &tuning),
        Command::Match {
            target,
            source,
            field_out,
            usage_out,
            verify,
            tuning,
        } => cmd_match(&target, &source, &field_out, usage_out.as_deref(), verify, &tuning),
        Command::OptimizeLayer {
            content,
            style,
            out,
            field_out,
            tuning,
        } => cmd_optimize_layer(&content, &style, &out, field_out.as_deref(), &tuning),
        Command::Pipeline {
            content,
            style,
            out,
            manifest,
            artifacts,
            tuning,
        } => cmd_pipeline(&content, &style, &out, manifest.as_deref(), artifacts.as_deref(), &tuning),
        Command::UsageStudy {
            content,
            style,
            sweep,
            out,
            tuning,
        } => cmd_usage_study(&content, &style, &sweep, out.as_deref(), &tuning),
        Command::Selfcheck { inject_fault } => cmd_selfcheck(inject_fault),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                // Exit code 2 is reserved for infeasible configurations.
                _ => ExitCode::from(3),
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            eprintln!("error: {}", failure.message());
            ExitCode::from(failure.exit_code())
        }
    }
}
