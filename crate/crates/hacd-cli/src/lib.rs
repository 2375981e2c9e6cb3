//! Command-line front door: synthesize scenes, train the comparison
//! network, run detectors, evaluate score maps, and emit the benchmark
//! table.
//!
//! Exit status: 0 on success, 2 for usage errors (unknown subcommand, flag,
//! or value), 1 for module errors. Outputs are written to temporary names
//! and renamed into place, so failed runs leave no partial files.

pub mod config;

use std::fs;
use std::path::{Path, PathBuf};

use hacd_core::classical::{
    detect_cc, detect_ce, detect_diff_rx, detect_sacd, detect_sdhacd, detect_usfa, fit_statistics,
};
use hacd_core::cube::{radiometric_align, HsiCube};
use hacd_core::envi::{load_envi, save_envi, Interleave};
use hacd_core::error::Error as CoreError;
use hacd_core::eval::{compute_auc, compute_roc, metrics_json, roc_to_csv};
use hacd_core::maps::{
    export_map, export_mask_csv, import_map_csv, import_mask_csv, MapFormat, ScoreMap,
};
use hacd_core::mtcnet::{
    infer_loss_map, infer_loss_map_tiled, loss_history_csv, train, MtcNetModel,
};
use hacd_core::scene::generate_scene;

use config::{parse_config, parse_sidecar, sidecar_text, RunConfig};

pub const METHODS: [&str; 7] = ["cc", "ce", "usfa", "diff_rx", "sacd", "sdhacd", "mtcnet"];

const USAGE: &str = "\
usage: hacd <subcommand> [flags]

subcommands:
  synth     --out DIR [--config PATH] [--seed N]
            write a synthetic bi-temporal scene: t1.bin(.hdr), t2.bin(.hdr), mask.csv
  train     --t1 DATA --t2 DATA --out DIR [--config PATH] [--seed N]
            train the comparison network; writes model.ckpt(.meta), loss_history.csv
  detect    --t1 DATA --t2 DATA --method NAME --out DIR
            [--checkpoint PATH] [--config PATH] [--align|--no-align]
            write <method>.pgm and <method>.csv score maps
  evaluate  --map CSV --mask CSV --out DIR [--method NAME]
            write roc.csv and metrics.json
  bench     --t1 DATA --t2 DATA --mask CSV --out DIR
            [--checkpoint PATH] [--config PATH] [--align|--no-align]
            run every detector and write bench.csv (method,auc)

cube inputs name the binary data file; the header is looked up at DATA.hdr.
methods: cc | ce | usfa | diff_rx | sacd | sdhacd | mtcnet (needs --checkpoint)";

enum CliError {
    Usage(String),
    Module(CoreError),
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        CliError::Module(e)
    }
}

type CliResult<T> = Result<T, CliError>;

fn usage_err(message: impl Into<String>) -> CliError {
    CliError::Usage(message.into())
}

/// Parsed command-line flags.
#[derive(Debug, Default)]
struct Flags {
    config: Option<PathBuf>,
    method: Option<String>,
    checkpoint: Option<PathBuf>,
    out: Option<PathBuf>,
    seed: Option<u64>,
    align: bool,
    t1: Option<PathBuf>,
    t2: Option<PathBuf>,
    mask: Option<PathBuf>,
    map: Option<PathBuf>,
}

fn parse_flags(args: &[String]) -> CliResult<Flags> {
    let mut flags = Flags {
        align: true,
        ..Flags::default()
    };
    let mut i = 0;
    let value = |i: &mut usize, name: &str| -> CliResult<String> {
        *i += 1;
        args.get(*i)
            .cloned()
            .ok_or_else(|| usage_err(format!("flag {} needs a value", name)))
    };
    while i < args.len() {
        match args[i].as_str() {
            "--config" => flags.config = Some(value(&mut i, "--config")?.into()),
            "--method" => flags.method = Some(value(&mut i, "--method")?),
            "--checkpoint" => flags.checkpoint = Some(value(&mut i, "--checkpoint")?.into()),
            "--out" => flags.out = Some(value(&mut i, "--out")?.into()),
            "--seed" => {
                let raw = value(&mut i, "--seed")?;
                flags.seed =
                    Some(raw.parse().map_err(|_| {
                        usage_err(format!("--seed expects an integer, got {:?}", raw))
                    })?);
            }
            "--align" => flags.align = true,
            "--no-align" => flags.align = false,
            "--t1" => flags.t1 = Some(value(&mut i, "--t1")?.into()),
            "--t2" => flags.t2 = Some(value(&mut i, "--t2")?.into()),
            "--mask" => flags.mask = Some(value(&mut i, "--mask")?.into()),
            "--map" => flags.map = Some(value(&mut i, "--map")?.into()),
            other => return Err(usage_err(format!("unknown flag {:?}", other))),
        }
        i += 1;
    }
    Ok(flags)
}

fn load_run_config(flags: &Flags) -> CliResult<RunConfig> {
    let mut config = match &flags.config {
        Some(path) => parse_config(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = flags.seed {
        config.seed = seed;
        config.scene.seed = seed;
        config.train.seed = seed;
    }
    Ok(config)
}

fn require(path: &Option<PathBuf>, flag: &str) -> CliResult<PathBuf> {
    path.clone()
        .ok_or_else(|| usage_err(format!("missing required flag {}", flag)))
}

fn header_path(data: &Path) -> PathBuf {
    let mut name = data
        .file_name()
        .map(|n| n.to_os_string())
        .unwrap_or_default();
    name.push(".hdr");
    data.with_file_name(name)
}

fn load_cube(data: &Path) -> CliResult<HsiCube> {
    Ok(load_envi(&header_path(data), data)?)
}

/// Write via a temporary sibling and rename into place.
fn write_atomic(path: &Path, bytes: &[u8]) -> CliResult<()> {
    let mut tmp_name = path
        .file_name()
        .map(|n| n.to_os_string())
        .unwrap_or_default();
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    fs::write(&tmp, bytes).map_err(|e| CoreError::Io {
        path: tmp.clone(),
        source: e,
    })?;
    fs::rename(&tmp, path).map_err(|e| CoreError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

fn save_cube_atomic(cube: &HsiCube, data: &Path) -> CliResult<()> {
    let header = header_path(data);
    let tmp_data = data.with_extension("bin.tmp");
    let tmp_header = header.with_extension("hdr.tmp");
    save_envi(cube, &tmp_header, &tmp_data, Interleave::Bsq)?;
    fs::rename(&tmp_data, data).map_err(|e| CoreError::Io {
        path: data.to_path_buf(),
        source: e,
    })?;
    fs::rename(&tmp_header, &header).map_err(|e| CoreError::Io {
        path: header.clone(),
        source: e,
    })?;
    Ok(())
}

fn ensure_out_dir(out: &Path) -> CliResult<()> {
    fs::create_dir_all(out).map_err(|e| CoreError::Io {
        path: out.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

fn export_score_map(map: &ScoreMap, out: &Path, stem: &str) -> CliResult<()> {
    // export_map writes directly; route through temp names for atomicity.
    let pgm_tmp = out.join(format!("{}.pgm.tmp", stem));
    let csv_tmp = out.join(format!("{}.csv.tmp", stem));
    export_map(map, &pgm_tmp, MapFormat::Pgm16)?;
    export_map(map, &csv_tmp, MapFormat::Csv)?;
    let pgm = out.join(format!("{}.pgm", stem));
    let csv = out.join(format!("{}.csv", stem));
    fs::rename(&pgm_tmp, &pgm).map_err(|e| CoreError::Io {
        path: pgm,
        source: e,
    })?;
    fs::rename(&csv_tmp, &csv).map_err(|e| CoreError::Io {
        path: csv,
        source: e,
    })?;
    Ok(())
}

fn cmd_synth(flags: &Flags) -> CliResult<()> {
    let out = require(&flags.out, "--out")?;
    let config = load_run_config(flags)?;
    ensure_out_dir(&out)?;
    let (t1, t2, mask) = generate_scene(&config.scene)?;
    save_cube_atomic(&t1, &out.join("t1.bin"))?;
    save_cube_atomic(&t2, &out.join("t2.bin"))?;
    let mask_tmp = out.join("mask.csv.tmp");
    export_mask_csv(&mask, &mask_tmp)?;
    fs::rename(&mask_tmp, out.join("mask.csv")).map_err(|e| CoreError::Io {
        path: out.join("mask.csv"),
        source: e,
    })?;
    println!(
        "synth: wrote {}x{}x{} scene with {} anomalous pixels to {}",
        t1.height(),
        t1.width(),
        t1.bands(),
        mask.positives(),
        out.display()
    );
    Ok(())
}

fn cmd_train(flags: &Flags) -> CliResult<()> {
    let out = require(&flags.out, "--out")?;
    let t1_path = require(&flags.t1, "--t1")?;
    let t2_path = require(&flags.t2, "--t2")?;
    let config = load_run_config(flags)?;
    ensure_out_dir(&out)?;
    let cube1 = load_cube(&t1_path)?;
    let cube2 = load_cube(&t2_path)?;
    let (model, history) = train(&cube1, &cube2, &config.arch, &config.train)?;

    let ckpt_tmp = out.join("model.ckpt.tmp");
    model.save(&ckpt_tmp)?;
    let ckpt = out.join("model.ckpt");
    fs::rename(&ckpt_tmp, &ckpt).map_err(|e| CoreError::Io {
        path: ckpt,
        source: e,
    })?;
    write_atomic(
        &out.join("model.ckpt.meta"),
        sidecar_text(&config).as_bytes(),
    )?;
    write_atomic(
        &out.join("loss_history.csv"),
        loss_history_csv(&history).as_bytes(),
    )?;
    println!(
        "train: {} epochs, final mean loss {:.6}, checkpoint at {}",
        history.len(),
        history.last().copied().unwrap_or(f64::NAN),
        out.join("model.ckpt").display()
    );
    Ok(())
}

fn load_model(checkpoint: &Path) -> CliResult<MtcNetModel> {
    let meta = checkpoint.with_extension("ckpt.meta");
    let sidecar = if meta.exists() {
        meta
    } else {
        let mut name = checkpoint
            .file_name()
            .map(|n| n.to_os_string())
            .unwrap_or_default();
        name.push(".meta");
        checkpoint.with_file_name(name)
    };
    let config = parse_sidecar(&sidecar)?;
    Ok(MtcNetModel::load(&config.arch, checkpoint)?)
}

/// Tile the inference pass when the whole-image feature volumes would be
/// large; the tiled and whole-image paths agree.
fn run_mtcnet(model: &MtcNetModel, x1: &HsiCube, x2: &HsiCube) -> CliResult<ScoreMap> {
    let feature_elems = model.arch().c2 * x1.bands().div_ceil(2) * x1.pixel_count();
    const TILE_THRESHOLD_ELEMS: usize = 32 << 20;
    if feature_elems > TILE_THRESHOLD_ELEMS {
        Ok(infer_loss_map_tiled(model, x1, x2, 64)?)
    } else {
        Ok(infer_loss_map(model, x1, x2)?)
    }
}

fn run_method(
    method: &str,
    config: &RunConfig,
    checkpoint: &Option<PathBuf>,
    x1: &HsiCube,
    x2: &HsiCube,
) -> CliResult<ScoreMap> {
    let map = match method {
        "cc" | "ce" | "diff_rx" | "sacd" | "sdhacd" => {
            let stats = fit_statistics(x1, x2, config.reg_eps)?;
            match method {
                "cc" => detect_cc(&stats, x1, x2)?,
                "ce" => detect_ce(&stats, x1, x2)?,
                "diff_rx" => detect_diff_rx(&stats, x1, x2)?,
                "sacd" => detect_sacd(&stats, x1, x2)?,
                _ => detect_sdhacd(&stats, x1, x2)?,
            }
        }
        "usfa" => detect_usfa(x1, x2, config.usfa_iterations, config.reg_eps)?,
        "mtcnet" => {
            let ckpt = checkpoint
                .clone()
                .ok_or_else(|| usage_err("method mtcnet needs --checkpoint"))?;
            let model = load_model(&ckpt)?;
            run_mtcnet(&model, x1, x2)?
        }
        other => {
            return Err(usage_err(format!(
                "unknown method {:?}; valid methods: {}",
                other,
                METHODS.join(" | ")
            )))
        }
    };
    Ok(map)
}

fn cmd_detect(flags: &Flags) -> CliResult<()> {
    let out = require(&flags.out, "--out")?;
    let t1_path = require(&flags.t1, "--t1")?;
    let t2_path = require(&flags.t2, "--t2")?;
    let method = flags.method.clone().ok_or_else(|| {
        usage_err(format!(
            "missing --method; valid methods: {}",
            METHODS.join(" | ")
        ))
    })?;
    if !METHODS.contains(&method.as_str()) {
        return Err(usage_err(format!(
            "unknown method {:?}; valid methods: {}",
            method,
            METHODS.join(" | ")
        )));
    }
    let config = load_run_config(flags)?;
    ensure_out_dir(&out)?;
    let x1 = load_cube(&t1_path)?;
    let x2_raw = load_cube(&t2_path)?;
    let x2 = if flags.align {
        radiometric_align(&x1, &x2_raw)?
    } else {
        x2_raw
    };
    let map = run_method(&method, &config, &flags.checkpoint, &x1, &x2)?;
    export_score_map(&map, &out, &method)?;
    println!("detect: {} score map written to {}", method, out.display());
    Ok(())
}

fn cmd_evaluate(flags: &Flags) -> CliResult<()> {
    let out = require(&flags.out, "--out")?;
    let map_path = require(&flags.map, "--map")?;
    let mask_path = require(&flags.mask, "--mask")?;
    ensure_out_dir(&out)?;
    let map = import_map_csv(&map_path)?;
    let mask = import_mask_csv(&mask_path)?;
    let curve = compute_roc(&map, &mask)?;
    let auc = compute_auc(&curve);
    let method = flags
        .method
        .clone()
        .unwrap_or_else(|| "unknown".to_string());
    let n_pos = mask.positives();
    let n_neg = mask.labels().len() - n_pos;
    write_atomic(&out.join("roc.csv"), roc_to_csv(&curve).as_bytes())?;
    write_atomic(
        &out.join("metrics.json"),
        metrics_json(&method, auc, n_pos, n_neg).as_bytes(),
    )?;
    println!(
        "evaluate: auc {:.6} over {} positives / {} negatives",
        auc, n_pos, n_neg
    );
    Ok(())
}

fn cmd_bench(flags: &Flags) -> CliResult<()> {
    let out = require(&flags.out, "--out")?;
    let t1_path = require(&flags.t1, "--t1")?;
    let t2_path = require(&flags.t2, "--t2")?;
    let mask_path = require(&flags.mask, "--mask")?;
    let config = load_run_config(flags)?;
    ensure_out_dir(&out)?;
    let x1 = load_cube(&t1_path)?;
    let x2_raw = load_cube(&t2_path)?;
    let x2 = if flags.align {
        radiometric_align(&x1, &x2_raw)?
    } else {
        x2_raw
    };
    let mask = import_mask_csv(&mask_path)?;

    let mut rows = String::from("method,auc\n");
    for method in METHODS {
        if method == "mtcnet" && flags.checkpoint.is_none() {
            continue;
        }
        let map = run_method(method, &config, &flags.checkpoint, &x1, &x2)?;
        let auc = compute_auc(&compute_roc(&map, &mask)?);
        export_score_map(&map, &out, method)?;
        rows.push_str(&format!("{},{}\n", method, auc));
        println!("bench: {} auc {:.6}", method, auc);
    }
    write_atomic(&out.join("bench.csv"), rows.as_bytes())?;
    println!(
        "bench: table written to {}",
        out.join("bench.csv").display()
    );
    Ok(())
}

/// Entry point shared by main and the tests: returns the process exit code.
pub fn dispatch(args: &[String]) -> i32 {
    let Some(subcommand) = args.first() else {
        eprintln!("{}", USAGE);
        return 2;
    };
    let rest = &args[1..];
    let result = match subcommand.as_str() {
        "synth" => parse_flags(rest).and_then(|f| cmd_synth(&f)),
        "train" => parse_flags(rest).and_then(|f| cmd_train(&f)),
        "detect" => parse_flags(rest).and_then(|f| cmd_detect(&f)),
        "evaluate" => parse_flags(rest).and_then(|f| cmd_evaluate(&f)),
        "bench" => parse_flags(rest).and_then(|f| cmd_bench(&f)),
        "help" | "--help" | "-h" => {
            println!("{}", USAGE);
            return 0;
        }
        other => Err(usage_err(format!("unknown subcommand {:?}", other))),
    };
    match result {
        Ok(()) => 0,
        Err(CliError::Usage(message)) => {
            eprintln!("error: {}", message);
            eprintln!("{}", USAGE);
            2
        }
        Err(CliError::Module(error)) => {
            eprintln!("error: {}", error);
            1
        }
    }
}
