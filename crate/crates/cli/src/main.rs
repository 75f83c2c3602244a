mod exit;
mod manifest;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};
use symbiotic::checkpoint;
use symbiotic::data::{generate, Annotation, Dataset, GenOptions, SynthSpec};
use symbiotic::gradcheck;
use symbiotic::mechanisms::{self, FootprintDims, Mechanism};
use symbiotic::model::{MaskSource, Model, Phi};
use symbiotic::training::{self, MaskProvider, TrainConfig, Trainer};

use exit::{as_data_error, CliError, CliResult, CHECK_FAILED};
use manifest::{beside, RunManifest, RUN_MANIFEST};

#[derive(Parser)]
#[command(name = "symbiotic", version, about = "Segmentation-guided attribute prediction experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory.
    GenData {
        /// JSON generator spec; defaults are used for absent keys.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n: usize,
        /// Fraction of samples annotated with label maps (the rest get attributes).
        #[arg(long, default_value_t = 0.5)]
        split: f64,
        /// Overrides the spec's seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        force: bool,
        /// Also store label maps for every sample, for mask-consuming variants.
        #[arg(long)]
        oracle_masks: bool,
        /// Annotate every sample with both label maps and attributes (evaluation sets).
        #[arg(long)]
        full: bool,
    },
    /// Train a model from a JSON config.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Dataset to evaluate on after training when the config has no held-out tail.
        #[arg(long)]
        eval_data: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Evaluate a checkpoint, or a prediction file, against a dataset.
    Eval {
        #[arg(long, conflicts_with = "predictions", required_unless_present = "predictions")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        predictions: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Where to write attribute predictions of a checkpoint.
        #[arg(long)]
        predictions_out: Option<PathBuf>,
        /// Masks for mask-consuming variants.
        #[arg(long, default_value = "ground_truth_onehot")]
        mask_source: String,
        #[arg(long, default_value_t = 50)]
        batch: usize,
    },
    /// Finite-difference check of every differentiable operation.
    Gradcheck {
        /// `all`, a module name, or an op name.
        #[arg(long, default_value = "all")]
        module: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        seeds: u64,
    },
    /// Mechanism memory footprint: closed form vs instrumented count.
    Footprint {
        #[arg(long, value_enum)]
        mechanism: MechanismArg,
        #[arg(long)]
        ns: usize,
        #[arg(long)]
        na: usize,
        #[arg(long)]
        c: usize,
        #[arg(long)]
        h: usize,
        #[arg(long)]
        w: usize,
    },
    /// Export a normalized view of an SA embedding kernel as CSV.
    InspectPhi {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum)]
        which: WhichPhi,
        /// `channels`: one row per output channel. `attributes`: Φ_S projected
        /// through the final attribute classifier, one row per attribute.
        #[arg(long, value_enum, default_value = "channels")]
        view: PhiView,
        #[arg(long)]
        out: PathBuf,
    },
    /// Average two aligned prediction files.
    Ensemble {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum MechanismArg {
    Ssp,
    Sa,
}

#[derive(Clone, Copy, ValueEnum)]
enum WhichPhi {
    PhiS,
    PhiA,
}

#[derive(Clone, Copy, ValueEnum)]
enum PhiView {
    Channels,
    Attributes,
}

fn threads() -> CliResult<usize> {
    match std::env::var("SYMBIOTIC_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => v
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| CliError::usage(format!("SYMBIOTIC_THREADS must be a positive integer, got `{v}`"))),
    }
}

/// Makes `dir` available for output; an existing directory is only cleared
/// with `force`.
fn prepare_dir(dir: &Path, force: bool) -> CliResult<()> {
    if dir.exists() {
        if !force {
            return Err(CliError::usage(format!("{} already exists (pass --force to overwrite)", dir.display())));
        }
        fs::remove_dir_all(dir)?;
    }
    fs::create_dir_all(dir)?;
    Ok(())
}

fn read_dataset(dir: &Path) -> CliResult<Dataset> {
    Dataset::read(dir).map_err(as_data_error)
}

fn gen_data(
    spec: Option<PathBuf>,
    out: PathBuf,
    n: usize,
    split: f64,
    seed: Option<u64>,
    force: bool,
    oracle_masks: bool,
    full: bool,
) -> CliResult<()> {
    let mut spec: SynthSpec = match &spec {
        Some(p) => serde_json::from_str(
            &fs::read_to_string(p).map_err(|e| CliError::usage(format!("{}: {e}", p.display())))?,
        )?,
        None => SynthSpec::default(),
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    let opts = GenOptions {
        annotation: if full { Annotation::Full } else { Annotation::Disjoint },
        oracle_masks,
        ..GenOptions::new(n, split)
    };
    let ds = generate(&spec, &opts).map_err(as_data_error)?;
    let mut run = RunManifest::start("gen-data", json!({ "spec": spec, "options": opts }), threads()?);
    prepare_dir(&out, force)?;
    let m = ds.write(&out).map_err(as_data_error)?;
    run.seed = Some(spec.seed);
    run.dataset_hash = Some(ds.content_hash());
    run.metrics = json!({ "counts": m.counts });
    for entry in fs::read_dir(&out)? {
        run.artifact(&entry?.path());
    }
    run.artifacts.sort();
    run.finish(&out.join(RUN_MANIFEST))?;
    println!("wrote {} samples to {} ({})", ds.len(), out.display(), run_hash_line(&ds));
    Ok(())
}

fn run_hash_line(ds: &Dataset) -> String {
    format!("dataset hash {}", ds.content_hash())
}

fn train(config: PathBuf, data: PathBuf, out: PathBuf, eval_data: Option<PathBuf>, force: bool) -> CliResult<()> {
    let text = fs::read_to_string(&config).map_err(|e| CliError::usage(format!("{}: {e}", config.display())))?;
    let cfg = TrainConfig::from_json(&text)?;
    let ds = read_dataset(&data)?;
    let eval_ds = eval_data.as_deref().map(read_dataset).transpose()?;
    let mut run = RunManifest::start("train", serde_json::to_value(&cfg)?, threads()?);
    run.seed = Some(cfg.seed);
    run.dataset_hash = Some(ds.content_hash());
    let trainer = Trainer::new(&cfg, &ds)?;
    prepare_dir(&out, force)?;
    let mut result = trainer.run(Some(&out))?;
    let report = match (result.report.take(), &eval_ds) {
        (Some(r), _) => Some(r),
        (None, Some(eds)) => {
            let mut masks = MaskProvider::from_source(cfg.mask_source.as_ref(), cfg.n_s)?;
            let (r, _) = training::evaluate(&result.model, &mut result.store, eds, &mut masks, &result.meta, cfg.eval_batch)?;
            fs::write(out.join("report.json"), r.to_json())?;
            Some(r)
        }
        (None, None) => None,
    };
    let last = result.records.last();
    run.metrics = json!({
        "steps": result.records.len(),
        "final_l_s": last.map(|r| r.l_s),
        "final_l_a": last.map(|r| r.l_a),
        "final_total": last.map(|r| r.total),
        "report": report.as_ref().map(|r| serde_json::from_str::<Value>(&r.to_json()).expect("valid json")),
    });
    run.artifact(&out.join("train_log.jsonl"));
    for c in &result.checkpoints {
        run.artifact(c);
    }
    if report.is_some() {
        run.artifact(&out.join("report.json"));
    }
    run.finish(&out.join(RUN_MANIFEST))?;
    println!("trained {} for {} steps into {}", cfg.variant, result.records.len(), out.display());
    if let Some(r) = report {
        print!("{}", r.to_json());
    }
    Ok(())
}

fn eval(
    checkpoint: Option<PathBuf>,
    predictions: Option<PathBuf>,
    data: PathBuf,
    out: PathBuf,
    predictions_out: Option<PathBuf>,
    mask_source: String,
    batch: usize,
) -> CliResult<()> {
    if batch == 0 {
        return Err(CliError::usage("--batch must be positive"));
    }
    let ds = read_dataset(&data)?;
    let mut run = RunManifest::start(
        "eval",
        json!({ "checkpoint": checkpoint, "predictions": predictions, "data": data, "mask_source": mask_source }),
        threads()?,
    );
    run.dataset_hash = Some(ds.content_hash());
    let report = match (&checkpoint, &predictions) {
        (Some(ck), _) => {
            let (meta, mut store) = checkpoint::load(ck)?;
            let cfg = &meta.model;
            if (cfg.n_s, cfg.n_a, cfg.height, cfg.width) != (ds.n_s(), ds.n_a(), ds.height(), ds.width()) {
                return Err(CliError::new(
                    exit::DATA,
                    format!(
                        "checkpoint expects n_s={}, n_a={}, {}x{} images; dataset has n_s={}, n_a={}, {}x{}",
                        cfg.n_s,
                        cfg.n_a,
                        cfg.height,
                        cfg.width,
                        ds.n_s(),
                        ds.n_a(),
                        ds.height(),
                        ds.width()
                    ),
                ));
            }
            let model = Model::new(meta.model.clone())?;
            let source: Option<MaskSource> =
                if meta.model.variant.needs_masks() { Some(mask_source.parse()?) } else { None };
            let mut masks = MaskProvider::from_source(source.as_ref(), ds.n_s())?;
            let (report, preds) = training::evaluate(&model, &mut store, &ds, &mut masks, &meta, batch)?;
            if let Some(p) = &predictions_out {
                training::write_predictions(p, &preds)?;
                run.artifact(p);
            }
            report
        }
        (None, Some(p)) => {
            let preds = training::read_predictions(p)?;
            let name = p.file_stem().map_or("predictions".into(), |s| s.to_string_lossy().into_owned());
            training::evaluate_predictions(&preds, &ds, &name)?
        }
        (None, None) => return Err(CliError::usage("pass --checkpoint or --predictions")),
    };
    let text = report.to_json();
    fs::write(&out, &text)?;
    run.artifact(&out);
    run.metrics = json!({ "macro_ap": report.macro_ap(), "mean_iou": report.mean_iou() });
    run.finish(&beside(&out))?;
    print!("{text}");
    Ok(())
}

fn gradcheck_cmd(module: String, seed: u64, seeds: u64) -> CliResult<()> {
    if seeds == 0 {
        return Err(CliError::usage("--seeds must be positive"));
    }
    let rows = gradcheck::run(&module, seed..seed + seeds)?;
    print!("{}", gradcheck::format_table(&rows));
    let failed = rows.iter().filter(|r| !r.passed).count();
    if failed > 0 {
        return Err(CliError::new(
            CHECK_FAILED,
            format!("{failed} of {} ops exceed rel. err {:e}", rows.len(), gradcheck::TOLERANCE),
        ));
    }
    println!("all {} ops pass over {seeds} seeds", rows.len());
    Ok(())
}

fn footprint_cmd(mechanism: MechanismArg, dims: FootprintDims) -> CliResult<()> {
    let mech = match mechanism {
        MechanismArg::Ssp => Mechanism::Ssp,
        MechanismArg::Sa => Mechanism::Sa,
    };
    let formula = mechanisms::footprint(mech, dims)?;
    let counted = mechanisms::instrumented_footprint(mech, dims, 0)?;
    println!("formula      {formula}");
    println!("instrumented {counted}");
    if formula != counted {
        return Err(CliError::new(CHECK_FAILED, "instrumented count differs from the closed form"));
    }
    Ok(())
}

fn inspect_phi_cmd(ck: PathBuf, which: WhichPhi, view: PhiView, out: PathBuf) -> CliResult<()> {
    let (meta, store) = checkpoint::load(&ck)?;
    let model = Model::new(meta.model.clone())?;
    let phi = match which {
        WhichPhi::PhiS => Phi::S,
        WhichPhi::PhiA => Phi::A,
    };
    let name = model
        .phi_weight_name(phi)
        .ok_or_else(|| CliError::new(exit::DATA, format!("a {} checkpoint has no embedding kernels", meta.model.variant)))?;
    let weight = store.get(&name)?;
    let cols = match phi {
        Phi::S => &meta.label_names,
        Phi::A => &meta.attr_names,
    };
    let inspection = match (view, phi) {
        (PhiView::Channels, _) => {
            let rows: Vec<String> = (0..weight.shape()[0]).map(|c| format!("channel_{c}")).collect();
            mechanisms::inspect_phi(weight, &rows, cols)?
        }
        (PhiView::Attributes, Phi::S) => {
            let head = model.final_attr_head().expect("SA models have an attribute head");
            let hw = store.get(&head.weight_name())?;
            mechanisms::inspect_phi_through_head(weight, hw, &meta.attr_names, cols)?
        }
        (PhiView::Attributes, Phi::A) => {
            return Err(CliError::usage("the attributes view applies to phi_s only"));
        }
    };
    let mut run = RunManifest::start("inspect-phi", json!({ "checkpoint": ck, "kernel": name }), threads()?);
    fs::write(&out, inspection.to_csv())?;
    run.artifact(&out);
    let argmax: Vec<&str> = inspection.row_argmax().iter().map(|&j| inspection.cols[j].as_str()).collect();
    run.metrics = json!({ "rows": inspection.rows, "row_argmax": argmax });
    run.finish(&beside(&out))?;
    println!("wrote {} rows x {} columns to {}", inspection.rows.len(), inspection.cols.len(), out.display());
    Ok(())
}

fn ensemble_cmd(a: PathBuf, b: PathBuf, out: PathBuf) -> CliResult<()> {
    let pa = training::read_predictions(&a)?;
    let pb = training::read_predictions(&b)?;
    let avg = training::ensemble_average(&pa, &pb)?;
    let mut run = RunManifest::start("ensemble", json!({ "a": a, "b": b }), threads()?);
    training::write_predictions(&out, &avg)?;
    run.artifact(&out);
    run.metrics = json!({ "samples": avg.len() });
    run.finish(&beside(&out))?;
    println!("averaged {} predictions into {}", avg.len(), out.display());
    Ok(())
}

fn dispatch(cli: Cli) -> CliResult<()> {
    threads()?;
    match cli.command {
        Command::GenData { spec, out, n, split, seed, force, oracle_masks, full } => {
            gen_data(spec, out, n, split, seed, force, oracle_masks, full)
        }
        Command::Train { config, data, out, eval_data, force } => train(config, data, out, eval_data, force),
        Command::Eval { checkpoint, predictions, data, out, predictions_out, mask_source, batch } => {
            eval(checkpoint, predictions, data, out, predictions_out, mask_source, batch)
        }
        Command::Gradcheck { module, seed, seeds } => gradcheck_cmd(module, seed, seeds),
        Command::Footprint { mechanism, ns, na, c, h, w } => {
            footprint_cmd(mechanism, FootprintDims { n_s: ns, n_a: na, c, h, w })
        }
        Command::InspectPhi { checkpoint, which, view, out } => inspect_phi_cmd(checkpoint, which, view, out),
        Command::Ensemble { a, b, out } => ensemble_cmd(a, b, out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { exit::USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code)
        }
    }
}
