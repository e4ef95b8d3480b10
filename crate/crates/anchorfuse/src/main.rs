//! Command-line front end for the pipeline: anchor extraction, token
//! modulation, gradient verification, synthetic data, two-stage training,
//! and evaluation.
//!
//! Usage errors exit with code 2 (clap's default); validation and runtime
//! errors print `error: ...` to stderr and exit with code 1.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand};

use anchorfuse::dataset::{
    generate_synthetic, load_dataset, prediction_records, write_synthetic_dir, SyntheticSpec,
};
use anchorfuse::eval::{load_eval_records, save_eval_records, score_records, TaskKind, TaskReport};
use anchorfuse::geo::{
    build_feature_set, AnchorFeatureSet, EmbeddingFieldStore, SpatioTemporalBox,
};
use anchorfuse::sft::{
    load_checkpoint, save_checkpoint, stage1_train, stage2_train, ModelConfig, ToyVlm,
    TrainConfig,
};
use anchorfuse::tensor::{read_tensor_file, write_tensor_file, Matrix};
use anchorfuse::tlm::{finite_difference_check, tlm_forward, PriorBatch, TlmParams, TokenGrid};

#[derive(Parser)]
#[command(
    name = "anchorfuse",
    version,
    about = "Geo-anchored prior extraction and token-wise modulation toolkit"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Extract an anchor-grid feature set from embedding-field rasters.
    ExtractAnchors {
        /// Query box as lon_min,lat_min,lon_max,lat_max,year
        #[arg(long = "box", value_name = "LON1,LAT1,LON2,LAT2,YEAR")]
        bbox: String,
        /// Anchor lattice as LONxLAT node counts (at least 2x2)
        #[arg(long, value_name = "NxM", default_value = "4x4")]
        grid: String,
        /// AEFS raster file; repeat for multiple years
        #[arg(long, required = true)]
        store: Vec<PathBuf>,
        /// Output feature-set JSON
        #[arg(long)]
        out: PathBuf,
    },
    /// Modulate an image token grid with anchored prior features.
    Fuse {
        /// Token grid: rank-3 TNSR file laid out H x W x C
        #[arg(long)]
        tokens: PathBuf,
        /// Anchored feature-set JSON (as written by extract-anchors)
        #[arg(long)]
        priors: PathBuf,
        /// Modulation parameter JSON
        #[arg(long)]
        params: PathBuf,
        /// Output TNSR file (same H x W x C layout)
        #[arg(long)]
        out: PathBuf,
    },
    /// Verify the analytic modulation gradients against finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of random instances to check
        #[arg(long, default_value_t = 20)]
        instances: usize,
    },
    /// Generate the synthetic benchmark (images, features, store, records).
    GenSynthetic {
        /// Generator spec JSON; defaults apply when omitted
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Output directory
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one stage on a dataset directory.
    Train {
        /// 1 trains the modulation network, 2 the head adapters
        #[arg(long)]
        stage: u8,
        /// Dataset directory (uses d1.jsonl / d2.jsonl) or a .jsonl file
        #[arg(long)]
        data: PathBuf,
        /// Training config JSON
        #[arg(long)]
        config: PathBuf,
        /// Output checkpoint; the loss curve lands next to it as .loss.csv
        #[arg(long)]
        out: PathBuf,
        /// Checkpoint to start from (required for stage 2)
        #[arg(long)]
        init: Option<PathBuf>,
        /// Also write evaluation records predicted on the question set
        #[arg(long)]
        pred_out: Option<PathBuf>,
    },
    /// Score prediction records for one task, or all tasks present.
    Eval {
        /// counting | localization | classification | detection
        #[arg(long)]
        task: Option<String>,
        /// JSONL records file
        #[arg(long)]
        records: PathBuf,
        /// Detection IoU threshold in (0, 1]
        #[arg(long, default_value_t = 0.5)]
        iou: f64,
        /// Also write the report(s) as JSON
        #[arg(long)]
        json_out: Option<PathBuf>,
    },
}

fn parse_bbox(s: &str) -> Result<SpatioTemporalBox> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    if parts.len() != 5 {
        bail!("--box needs 5 comma-separated values (lon_min,lat_min,lon_max,lat_max,year), got {}", parts.len());
    }
    let num = |i: usize, what: &str| -> Result<f64> {
        parts[i]
            .parse::<f64>()
            .with_context(|| format!("--box {what} {:?} is not a number", parts[i]))
    };
    let year: i32 = parts[4]
        .parse()
        .with_context(|| format!("--box year {:?} is not an integer", parts[4]))?;
    Ok(SpatioTemporalBox::new(
        num(0, "lon_min")?,
        num(1, "lat_min")?,
        num(2, "lon_max")?,
        num(3, "lat_max")?,
        year,
    )?)
}

fn parse_grid(s: &str) -> Result<(usize, usize)> {
    let (a, b) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| anyhow!("--grid must look like 4x4, got {s:?}"))?;
    let n_lon: usize = a.trim().parse().with_context(|| format!("--grid lon count {a:?}"))?;
    let n_lat: usize = b.trim().parse().with_context(|| format!("--grid lat count {b:?}"))?;
    Ok((n_lon, n_lat))
}

fn extract_anchors(
    bbox: &str,
    grid: &str,
    store: &[PathBuf],
    out: &Path,
) -> Result<()> {
    let bbox = parse_bbox(bbox)?;
    let (n_lon, n_lat) = parse_grid(grid)?;
    let store = EmbeddingFieldStore::load_files(store)?;
    let features = build_feature_set(&bbox, n_lon, n_lat, &store)?;
    features.save_json(out)?;
    println!(
        "extracted {} anchors ({n_lon}x{n_lat}) for year {} -> {}",
        features.records.len(),
        bbox.year,
        out.display()
    );
    Ok(())
}

fn fuse(tokens: &Path, priors: &Path, params: &Path, out: &Path) -> Result<()> {
    let (dims, data) = read_tensor_file(tokens)
        .with_context(|| format!("reading token grid {}", tokens.display()))?;
    let [h, w, c] = dims[..] else {
        bail!(
            "--tokens must be rank 3 (H x W x C), got rank {} {:?}",
            dims.len(),
            dims
        );
    };
    let grid = TokenGrid::new(Matrix::from_vec(h * w, c, data)?, h, w)?;
    let features = AnchorFeatureSet::load_json(priors)?;
    let priors = PriorBatch::from_feature_set(&features)?;
    let params = TlmParams::load_json(params)?;
    let (modulated, _tape) = tlm_forward(&grid, &priors, &params)?;
    write_tensor_file(out, &[h, w, c], modulated.data())?;
    println!(
        "modulated {h}x{w} tokens ({c} channels) with {} priors -> {}",
        features.records.len(),
        out.display()
    );
    Ok(())
}

fn gradcheck(seed: u64, instances: usize) -> Result<()> {
    const TOLERANCE: f64 = 1e-4;
    let report = finite_difference_check(seed, instances);
    for (name, err) in &report.per_tensor {
        println!("{name}: max rel err {err:.3e}");
    }
    println!(
        "gradcheck: {} instances, max rel err {:.3e} (tolerance {TOLERANCE:.0e})",
        report.instances, report.max_rel_err
    );
    if !report.passes(TOLERANCE) {
        bail!(
            "analytic gradients diverge from finite differences: {:.3e} > {TOLERANCE:.0e}",
            report.max_rel_err
        );
    }
    Ok(())
}

fn gen_synthetic(spec: Option<&Path>, out: &Path) -> Result<()> {
    let spec = match spec {
        Some(p) => SyntheticSpec::load_json(p)?,
        None => SyntheticSpec::default(),
    };
    let generated = generate_synthetic(&spec)?;
    write_synthetic_dir(&generated, out)?;
    println!(
        "generated {} samples ({} caption records, {} question records) -> {}",
        spec.n_samples,
        generated.d1.len(),
        generated.d2.len(),
        out.display()
    );
    Ok(())
}

/// Dataset file for a stage: a directory means its d1/d2 convention.
fn stage_data_path(data: &Path, stage: u8) -> PathBuf {
    if data.is_dir() {
        data.join(if stage == 1 { "d1.jsonl" } else { "d2.jsonl" })
    } else {
        data.to_path_buf()
    }
}

fn train(
    stage: u8,
    data: &Path,
    config: &Path,
    out: &Path,
    init: Option<&Path>,
    pred_out: Option<&Path>,
) -> Result<()> {
    let cfg = TrainConfig::load_json(config)?;
    if cfg.stage != stage {
        bail!(
            "--stage {stage} disagrees with the config's stage {} ({})",
            cfg.stage,
            config.display()
        );
    }

    let data_path = stage_data_path(data, stage);
    let records = load_dataset(&data_path)
        .with_context(|| format!("loading {}", data_path.display()))?;
    let base = data_path.parent().unwrap_or_else(|| Path::new("."));
    let samples: Vec<_> = records
        .iter()
        .map(|r| r.to_sample(base))
        .collect::<Result<_, _>>()?;

    let report = match stage {
        1 => {
            if init.is_some() {
                bail!("--init only applies to stage 2; stage 1 starts from the seeded initialization");
            }
            let (model_cfg, _, _) = cfg.resolve()?;
            let mut model = ToyVlm::new(model_cfg, cfg.seed)?;
            let report = stage1_train(&mut model, &samples, &cfg)?;
            save_checkpoint(&model, out)?;
            (report, model)
        }
        2 => {
            let init = init.ok_or_else(|| anyhow!("--stage 2 requires --init CHECKPOINT"))?;
            let mut model = load_checkpoint(init)?;
            // The checkpoint's architecture wins; a non-default model
            // section in the config must agree with it.
            if cfg.model != ModelConfig::default() && cfg.model != *model.config() {
                bail!(
                    "config model section disagrees with the checkpoint's architecture ({})",
                    init.display()
                );
            }
            let mut cfg = cfg.clone();
            cfg.model = model.config().clone();
            if let Some(r) = cfg.lora_rank {
                if r != model.config().lora_rank {
                    bail!(
                        "config lora_rank {r} disagrees with the checkpoint's {}",
                        model.config().lora_rank
                    );
                }
            }
            if let Some(a) = cfg.lora_alpha {
                if a != model.config().lora_alpha {
                    bail!(
                        "config lora_alpha {a} disagrees with the checkpoint's {}",
                        model.config().lora_alpha
                    );
                }
            }
            let report = stage2_train(&mut model, &samples, &cfg)?;
            save_checkpoint(&model, out)?;
            (report, model)
        }
        other => bail!("--stage must be 1 or 2, got {other}"),
    };
    let (report, model) = report;

    println!(
        "stage {stage}: {} samples, {} epochs, lr {}",
        samples.len(),
        report.epoch_mean_loss.len(),
        report.learning_rate
    );
    println!(
        "loss {:.6} -> {:.6}",
        report.first_loss(),
        report.final_loss()
    );
    println!("saved checkpoint -> {}", out.display());

    let curve = out.with_extension("loss.csv");
    report.save_csv(&curve)?;
    println!("saved loss curve -> {}", curve.display());

    if let Some(pred_out) = pred_out {
        let pred_path = if data.is_dir() {
            data.join("d2.jsonl")
        } else if stage == 2 {
            data.to_path_buf()
        } else {
            bail!("--pred-out with a file --data requires stage 2 (predictions run on the question set)");
        };
        let pred_records = load_dataset(&pred_path)?;
        let pred_base = pred_path.parent().unwrap_or_else(|| Path::new("."));
        let preds = prediction_records(&model, &pred_records, pred_base)?;
        save_eval_records(&preds, pred_out)?;
        println!("saved {} prediction records -> {}", preds.len(), pred_out.display());
    }
    Ok(())
}

fn eval(task: Option<&str>, records: &Path, iou: f64, json_out: Option<&Path>) -> Result<()> {
    let records = load_eval_records(records)?;
    let tasks: Vec<TaskKind> = match task {
        Some(t) => vec![t.parse()?],
        None => [
            TaskKind::Counting,
            TaskKind::Localization,
            TaskKind::Classification,
            TaskKind::Detection,
        ]
        .into_iter()
        .filter(|t| records.iter().any(|r| r.task() == *t))
        .collect(),
    };
    if tasks.is_empty() {
        bail!("no records found for any task");
    }
    let mut reports: BTreeMap<String, TaskReport> = BTreeMap::new();
    for t in tasks {
        let report = score_records(&records, t, iou)?;
        println!("{report}");
        reports.insert(t.to_string(), report);
    }
    if let Some(path) = json_out {
        let json = if reports.len() == 1 {
            serde_json::to_string_pretty(reports.values().next().expect("one report"))
        } else {
            serde_json::to_string_pretty(&reports)
        }
        .expect("reports serialize");
        std::fs::write(path, json + "\n")?;
        println!("saved metrics -> {}", path.display());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::ExtractAnchors { bbox, grid, store, out } => {
            extract_anchors(&bbox, &grid, &store, &out)
        }
        Command::Fuse { tokens, priors, params, out } => fuse(&tokens, &priors, &params, &out),
        Command::Gradcheck { seed, instances } => gradcheck(seed, instances),
        Command::GenSynthetic { spec, out } => gen_synthetic(spec.as_deref(), &out),
        Command::Train { stage, data, config, out, init, pred_out } => train(
            stage,
            &data,
            &config,
            &out,
            init.as_deref(),
            pred_out.as_deref(),
        ),
        Command::Eval { task, records, iou, json_out } => {
            eval(task.as_deref(), &records, iou, json_out.as_deref())
        }
    }
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
