//! Command-line front end: argument parsing, artifact writing, run
//! manifests and exit codes.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::aggregation::FusionMode;
use crate::error::{Error, Result};
use crate::model::SegModel;
use crate::synthdata::{generate_dataset, read_dataset, write_dataset, SegSample, SynthTaskSpec};
use crate::trainer::{
    compare_csv, compare_seeds_csv, compare_variants, evaluate, gradient_suite, load_checkpoint, split_holdout,
    standard_variants, train, EvalReport, TrainConfig,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

/// Dataset file name inside a directory written by `gen-data`.
pub const DATA_FILE: &str = "data.mcd";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Parser)]
#[command(name = "mcibi", version, about = "Feature-memory context aggregation for semantic segmentation")]
pub struct Cli {
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic segmentation dataset.
    GenData {
        /// Task spec file (`key = value` lines); the default task when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, default_value_t = 250)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory; receives data.mcd, spec.txt and manifest.json.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write metrics, memory log and checkpoint.
    Train {
        /// Training config file (`key = value` lines).
        #[arg(long)]
        config: PathBuf,
        /// Dataset file, or a directory containing data.mcd.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Separate validation dataset; otherwise the config's holdout is used.
        #[arg(long)]
        val: Option<PathBuf>,
        /// Continue from a checkpoint written by a previous run.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Also write attention and weight maps for the first sample.
        #[arg(long)]
        dump_intermediates: bool,
    },
    /// Evaluate a checkpoint: mIoU, per-class IoU and the confusion matrix.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Directory for eval.json and confusion.csv.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the baseline and MCIBI with shared seeds and tabulate mIoU.
    Compare {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        val: Option<PathBuf>,
        /// Number of seeds; run i uses seed + i.
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Compare every fusion mode instead of only the configured one.
        #[arg(long)]
        fusion_ablation: bool,
    },
    /// Write a checkpoint's memory rows and their pairwise cosine similarities.
    InspectMemory {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Parameter counts and forward time of the context paths.
    Bench {
        #[arg(long)]
        config: PathBuf,
        /// Number of timed forward passes per variant.
        #[arg(long, default_value_t = 20)]
        reps: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the full-model gradient check suite.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        #[arg(long, default_value_t = 1e-3)]
        tolerance: f64,
    },
}

/// Everything needed to reproduce one invocation.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub version: String,
    pub config: Option<TrainConfig>,
    pub seeds: BTreeMap<String, u64>,
    /// SHA-256 over the inputs, each framed as `blob <len>\0<bytes>`.
    pub input_hash: String,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub timings: BTreeMap<String, f64>,
}

impl RunManifest {
    fn new(command: &str, argv: &[String]) -> Self {
        RunManifest {
            command: command.into(),
            argv: argv.to_vec(),
            version: env!("CARGO_PKG_VERSION").into(),
            config: None,
            seeds: BTreeMap::new(),
            input_hash: String::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            timings: BTreeMap::new(),
        }
    }

    fn hash_inputs(&mut self, inputs: &[(&str, &[u8])]) {
        let mut h = Sha256::new();
        for (name, bytes) in inputs {
            h.update(format!("blob {}\0", bytes.len()).as_bytes());
            h.update(bytes);
            self.inputs.push(name.to_string());
        }
        self.input_hash = hex::encode(h.finalize());
    }

    fn write(&self, dir: &Path) -> Result<()> {
        std::fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// Parses `argv` (including the program name), runs the command and
/// returns the process exit code.
pub fn dispatch(argv: &[String]) -> i32 {
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_VALIDATION } else { EXIT_OK };
        }
    };
    let level = if cli.verbose { log::LevelFilter::Info } else { log::LevelFilter::Warn };
    let _ = env_logger::Builder::new().filter_level(level).try_init();
    match run(cli.command, argv) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                EXIT_VALIDATION
            } else {
                EXIT_RUNTIME
            }
        }
    }
}

fn read_text(path: &Path, what: &str) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::Validation(format!("cannot read {what} {}: {e}", path.display())))
}

fn read_bytes(path: &Path, what: &str) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::Validation(format!("cannot read {what} {}: {e}", path.display())))
}

fn require_checkpoint(path: &Path) -> Result<()> {
    if path.is_file() && crate::trainer::sidecar_path(path).is_file() {
        Ok(())
    } else {
        Err(Error::Validation(format!("checkpoint {} or its .json sidecar not found", path.display())))
    }
}

fn data_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(DATA_FILE)
    } else {
        path.to_path_buf()
    }
}

fn load_data(path: &Path) -> Result<(Vec<SegSample>, Vec<u8>)> {
    let p = data_path(path);
    let bytes = read_bytes(&p, "dataset")?;
    Ok((read_dataset(&p)?, bytes))
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<(TrainConfig, String)> {
    let text = read_text(path, "config")?;
    let mut cfg = TrainConfig::parse(&text)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok((cfg, text))
}

fn make_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    Ok(())
}

fn write_out(dir: &Path, name: &str, contents: impl AsRef<[u8]>, manifest: &mut RunManifest) -> Result<()> {
    std::fs::write(dir.join(name), contents)?;
    manifest.outputs.push(name.into());
    Ok(())
}

fn eval_summary(e: &EvalReport) -> String {
    let mut s = format!("mIoU,{}\n", e.miou);
    for (k, iou) in e.iou.iter().enumerate() {
        match iou {
            Some(v) => s.push_str(&format!("class{k},{v}\n")),
            None => s.push_str(&format!("class{k},\n")),
        }
    }
    s
}

fn confusion_csv(e: &EvalReport) -> String {
    let k = e.confusion.len();
    let mut s = String::from("gt\\pred");
    for c in 0..k {
        s.push_str(&format!(",{c}"));
    }
    s.push('\n');
    for (g, row) in e.confusion.iter().enumerate() {
        s.push_str(&g.to_string());
        for v in row {
            s.push_str(&format!(",{v}"));
        }
        s.push('\n');
    }
    s
}

fn matrix_csv(label: &str, rows: usize, cols: usize, at: impl Fn(usize, usize) -> f64) -> String {
    let mut s = String::from(label);
    for c in 0..cols {
        s.push_str(&format!(",{c}"));
    }
    s.push('\n');
    for r in 0..rows {
        s.push_str(&r.to_string());
        for c in 0..cols {
            s.push_str(&format!(",{}", at(r, c)));
        }
        s.push('\n');
    }
    s
}

/// Training and validation splits: a separate file when given, else the config's holdout.
fn splits<'a>(
    data: &'a [SegSample],
    val: &'a Option<(Vec<SegSample>, Vec<u8>)>,
    cfg: &TrainConfig,
) -> Result<(&'a [SegSample], &'a [SegSample])> {
    match val {
        Some((v, _)) => Ok((data, v.as_slice())),
        None => split_holdout(data, cfg.holdout),
    }
}

fn run(command: Command, argv: &[String]) -> Result<()> {
    let start = Instant::now();
    match command {
        Command::GenData { spec, count, seed, out } => {
            let mut m = RunManifest::new("gen-data", argv);
            let spec_text = match &spec {
                Some(p) => read_text(p, "spec")?,
                None => String::new(),
            };
            let task = if spec.is_some() {
                SynthTaskSpec::parse(&spec_text)?
            } else {
                SynthTaskSpec::default()
            };
            if count == 0 {
                return Err(Error::Validation("--count must be at least 1".into()));
            }
            let samples = generate_dataset(&task, count, seed)?;
            make_dir(&out)?;
            write_dataset(&samples, &out.join(DATA_FILE))?;
            m.outputs.push(DATA_FILE.into());
            write_out(&out, "spec.txt", task.to_text(), &mut m)?;
            m.seeds.insert("data".into(), seed);
            m.hash_inputs(&[("spec", spec_text.as_bytes())]);
            m.timings.insert("total".into(), start.elapsed().as_secs_f64());
            m.write(&out)?;
            println!("wrote {count} samples to {}", out.join(DATA_FILE).display());
        }
        Command::Train {
            config,
            data,
            out,
            val,
            resume,
            seed,
            dump_intermediates,
        } => {
            let (cfg, cfg_text) = load_config(&config, seed)?;
            let (samples, data_bytes) = load_data(&data)?;
            let val_data = val.as_deref().map(load_data).transpose()?;
            let (train_set, val_set) = splits(&samples, &val_data, &cfg)?;
            make_dir(&out)?;
            let mut m = RunManifest::new("train", argv);
            let mut inputs: Vec<(&str, &[u8])> = vec![("config", cfg_text.as_bytes()), ("data", &data_bytes)];
            if let Some((_, b)) = &val_data {
                inputs.push(("val", b));
            }
            if let Some(p) = &resume {
                require_checkpoint(p)?;
            }
            let resume_bytes = resume.as_deref().map(|p| read_bytes(p, "checkpoint")).transpose()?;
            if let Some(b) = &resume_bytes {
                inputs.push(("resume", b));
            }
            m.hash_inputs(&inputs);
            let outcome = train(cfg, train_set, val_set, Some(&out), resume.as_deref())?;
            let cfg = outcome.trainer.cfg.clone();
            m.seeds.insert("model".into(), cfg.seed);
            m.timings.insert("train".into(), start.elapsed().as_secs_f64());
            m.outputs.extend(
                ["metrics.csv", "memory.csv", "checkpoint.mct", "checkpoint.json"].map(String::from),
            );
            let every = cfg.checkpoint_every as u64;
            if every > 0 {
                for t in (every..=outcome.trainer.iteration).step_by(every as usize) {
                    m.outputs.push(format!("checkpoint_{t:06}.mct"));
                    m.outputs.push(format!("checkpoint_{t:06}.json"));
                }
            }
            if let Some(e) = &outcome.eval {
                write_out(&out, "eval.json", serde_json::to_string_pretty(e)?, &mut m)?;
                print!("{}", eval_summary(e));
            }
            if dump_intermediates {
                dump_first_sample(&outcome.trainer.model, train_set, &out, &mut m)?;
            }
            m.config = Some(cfg);
            m.timings.insert("total".into(), start.elapsed().as_secs_f64());
            m.write(&out)?;
        }
        Command::Eval { checkpoint, data, out } => {
            require_checkpoint(&checkpoint)?;
            let (model, _) = load_checkpoint(&checkpoint)?;
            let (samples, data_bytes) = load_data(&data)?;
            let report = evaluate(&model, &samples)?;
            print!("{}", eval_summary(&report));
            if let Some(dir) = out {
                make_dir(&dir)?;
                let mut m = RunManifest::new("eval", argv);
                let ck = read_bytes(&checkpoint, "checkpoint")?;
                m.hash_inputs(&[("checkpoint", &ck), ("data", &data_bytes)]);
                write_out(&dir, "eval.json", serde_json::to_string_pretty(&report)?, &mut m)?;
                write_out(&dir, "confusion.csv", confusion_csv(&report), &mut m)?;
                m.timings.insert("total".into(), start.elapsed().as_secs_f64());
                m.write(&dir)?;
            }
        }
        Command::Compare {
            config,
            data,
            out,
            val,
            seeds,
            seed,
            fusion_ablation,
        } => {
            let (cfg, cfg_text) = load_config(&config, seed)?;
            let (samples, data_bytes) = load_data(&data)?;
            let val_data = val.as_deref().map(load_data).transpose()?;
            if val_data.is_none() && cfg.holdout == 0 {
                return Err(Error::Validation("compare needs --val or a nonzero holdout in the config".into()));
            }
            if seeds == 0 {
                return Err(Error::Validation("--seeds must be at least 1".into()));
            }
            let (train_set, val_set) = splits(&samples, &val_data, &cfg)?;
            make_dir(&out)?;
            let mut m = RunManifest::new("compare", argv);
            let mut inputs: Vec<(&str, &[u8])> = vec![("config", cfg_text.as_bytes()), ("data", &data_bytes)];
            if let Some((_, b)) = &val_data {
                inputs.push(("val", b));
            }
            m.hash_inputs(&inputs);
            let seed_list: Vec<u64> = (0..seeds).map(|i| cfg.seed.wrapping_add(i)).collect();
            for (i, s) in seed_list.iter().enumerate() {
                m.seeds.insert(format!("run{i}"), *s);
            }
            let rows = compare_variants(&standard_variants(&cfg, fusion_ablation), &seed_list, train_set, val_set)?;
            let table = compare_csv(&rows);
            write_out(&out, "compare.csv", &table, &mut m)?;
            write_out(&out, "compare_seeds.csv", compare_seeds_csv(&rows), &mut m)?;
            for r in &rows {
                m.timings.insert(r.variant.clone(), r.seconds);
            }
            print!("{table}");
            m.config = Some(cfg);
            m.timings.insert("total".into(), start.elapsed().as_secs_f64());
            m.write(&out)?;
        }
        Command::InspectMemory { checkpoint, out } => {
            require_checkpoint(&checkpoint)?;
            let (model, manifest) = load_checkpoint(&checkpoint)?;
            let mem = model
                .memory()
                .ok_or_else(|| Error::Validation("checkpoint has no feature memory (baseline model)".into()))?;
            make_dir(&out)?;
            let mut m = RunManifest::new("inspect-memory", argv);
            let ck = read_bytes(&checkpoint, "checkpoint")?;
            m.hash_inputs(&[("checkpoint", &ck)]);
            let vals = mem.values();
            let (k, c) = (mem.num_classes(), mem.dim());
            write_out(&out, "memory_values.csv", matrix_csv("class", k, c, |r, j| vals.at2(r, j)), &mut m)?;
            let cos = mem.cosine_matrix();
            write_out(&out, "memory_cosine.csv", matrix_csv("class", k, k, |r, j| cos.at2(r, j)), &mut m)?;
            m.config = Some(manifest.config);
            m.timings.insert("total".into(), start.elapsed().as_secs_f64());
            m.write(&out)?;
            println!("memory: {k} classes x {c} channels, {} updates", mem.update_count());
        }
        Command::Bench { config, reps, out } => {
            let (cfg, cfg_text) = load_config(&config, None)?;
            if reps == 0 {
                return Err(Error::Validation("--reps must be at least 1".into()));
            }
            let table = bench(&cfg, reps)?;
            print!("{table}");
            if let Some(dir) = out {
                make_dir(&dir)?;
                let mut m = RunManifest::new("bench", argv);
                m.hash_inputs(&[("config", cfg_text.as_bytes())]);
                write_out(&dir, "bench.csv", &table, &mut m)?;
                m.seeds.insert("model".into(), cfg.seed);
                m.config = Some(cfg);
                m.timings.insert("total".into(), start.elapsed().as_secs_f64());
                m.write(&dir)?;
            }
        }
        Command::Gradcheck { seed, eps, tolerance } => {
            if eps.is_nan() || eps <= 0.0 || tolerance.is_nan() || tolerance <= 0.0 {
                return Err(Error::Validation("--eps and --tolerance must be positive".into()));
            }
            let mut failed = 0;
            println!("case,max_rel_error,entries,worst");
            for c in gradient_suite(seed, eps)? {
                let worst = c.report.worst.as_ref().map(|(n, i)| format!("{n}[{i}]")).unwrap_or_default();
                println!("{},{:e},{},{worst}", c.name, c.report.max_rel_error, c.report.entries_checked);
                if c.report.max_rel_error.is_nan() || c.report.max_rel_error >= tolerance {
                    failed += 1;
                }
            }
            if failed > 0 {
                return Err(Error::Contract(format!("{failed} gradient check case(s) above tolerance {tolerance}")));
            }
        }
    }
    Ok(())
}

/// Weight map, attention matrix and output probabilities for the first training sample.
fn dump_first_sample(model: &SegModel, samples: &[SegSample], dir: &Path, m: &mut RunManifest) -> Result<()> {
    use crate::numerics::io::tensor_to_bytes;
    use crate::numerics::Precision;
    let Some(s) = samples.first() else { return Ok(()) };
    let (outputs, cache) = model.forward(&s.image, model.memory().is_some())?;
    write_out(dir, "sample0_output.mct", tensor_to_bytes(&outputs.o, Precision::F64), m)?;
    if let Some(w) = &outputs.w {
        write_out(dir, "sample0_weights.mct", tensor_to_bytes(&w.probs, Precision::F64), m)?;
    }
    if let Some(p) = cache.attention() {
        write_out(dir, "sample0_attention.mct", tensor_to_bytes(p, Precision::F64), m)?;
    }
    if let Some(om) = &outputs.o_mem {
        write_out(dir, "sample0_memory_probs.mct", tensor_to_bytes(om, Precision::F64), m)?;
    }
    Ok(())
}

/// Parameter counts and mean forward time of the baseline, the
/// within-image stand-in and the dataset-level context path.
pub fn bench(cfg: &TrainConfig, reps: usize) -> Result<String> {
    let spec = SynthTaskSpec {
        num_classes: cfg.num_classes,
        ..SynthTaskSpec::default()
    };
    let spec = if spec.validate().is_ok() {
        spec
    } else {
        return Err(Error::Validation(format!(
            "bench uses the default synthetic task and needs num_classes = {}",
            SynthTaskSpec::default().num_classes
        )));
    };
    spec.check_stride(cfg.stride)?;
    let image = generate_dataset(&spec, 1, cfg.seed)?.remove(0).image;
    let variants = [
        ("baseline", false, false),
        ("within-image", false, true),
        ("mcibi", true, false),
    ];
    let mut base_params = 0;
    let mut s = String::from("variant,params,extra_params,ms_per_image\n");
    for (name, mcibi, within) in variants {
        let c = TrainConfig {
            mcibi,
            use_within_image: within,
            fusion: if mcibi { cfg.fusion } else { FusionMode::Concat },
            ..cfg.clone()
        };
        let model = SegModel::new(c.model_config(spec.in_channels), cfg.seed)?;
        let params = model.param_count();
        if name == "baseline" {
            base_params = params;
        }
        model.forward(&image, false)?;
        let t0 = Instant::now();
        for _ in 0..reps {
            model.forward(&image, false)?;
        }
        let ms = 1e3 * t0.elapsed().as_secs_f64() / reps as f64;
        s.push_str(&format!("{name},{params},{},{ms:.3}\n", params - base_params));
    }
    Ok(s)
}
