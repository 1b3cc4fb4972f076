use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use gbst_core::bytes::{self, ByteSequence};
use gbst_core::checkpoint;
use gbst_core::config::{CorpusSource, RunConfig};
use gbst_core::gbst::ScoreTable;
use gbst_core::gradcheck;
use gbst_core::oracle;
use gbst_core::profiler::{benchmark_steps, count_flops, expected_target_len};
use gbst_core::tensor::BackwardFault;
use gbst_core::training::{self, Corpus, Ema, StepRecord, TrainConfig};
use gbst_core::transformer::{Frontend, Model};
use gbst_core::{Error, Result, TOY_CORPUS};

use crate::{Cli, Command};

/// Oracle agreement required by `oracle-test`.
const ORACLE_TOLERANCE: f64 = 1e-10;
const PROGRESS_EVERY: u64 = 50;

pub fn run(cli: &Cli) -> Result<u8> {
    match &cli.command {
        Command::Pretrain => pretrain(cli),
        Command::Finetune { data, init } => finetune(cli, data.as_deref(), init.as_deref()),
        Command::ScoreViz { checkpoint, file, text } => score_viz(cli, checkpoint.as_deref(), file.as_deref(), text.as_deref()),
        Command::Gradcheck { inject_fault } => gradcheck(cli, inject_fault.as_deref()),
        Command::Profile => profile(cli),
        Command::OracleTest { instances } => oracle_test(cli, *instances),
    }
}

fn read_text(path: &Path, what: &str) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {what} {}: {e}", path.display())))
}

fn load_config(cli: &Cli, base: RunConfig) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::parse_over(&read_text(path, "config")?, base)?,
        None => base,
    };
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Creates the output directory and records the resolved configuration.
fn prepare_out(dir: &Path, cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.txt"), cfg.to_text())?;
    Ok(())
}

fn load_checkpoint(path: &Path) -> Result<(RunConfig, Model)> {
    if !path.exists() {
        return Err(Error::Config(format!("checkpoint {} does not exist", path.display())));
    }
    checkpoint::load(path)
}

/// Runs `train` with a metrics log, progress on stderr and the final
/// checkpoint.
fn train_with_log(
    out: &Path,
    cfg: &RunConfig,
    model: &mut Model,
    train: impl FnOnce(&mut Model, &mut dyn FnMut(&Model, &StepRecord) -> Result<()>) -> Result<Vec<StepRecord>>,
) -> Result<f64> {
    let mut log = BufWriter::new(fs::File::create(out.join("metrics.tsv"))?);
    let mut ema = Ema::with_window(100);
    let total = cfg.train.steps as u64;
    let every = cfg.train.checkpoint_every as u64;
    let mut on_step = |m: &Model, rec: &StepRecord| -> Result<()> {
        writeln!(log, "{}", rec.to_line())?;
        let smooth = ema.update(rec.loss);
        if rec.step.is_multiple_of(PROGRESS_EVERY) || rec.step == total {
            eprintln!("step {:>5}  loss {:.4}  ema {:.4}  lr {:.2e}", rec.step, rec.loss, smooth, rec.lr);
        }
        if every > 0 && rec.step.is_multiple_of(every) {
            checkpoint::save(&out.join(format!("checkpoint-{}.gbst", rec.step)), m, cfg)?;
        }
        Ok(())
    };
    train(model, &mut on_step)?;
    log.flush()?;
    checkpoint::save(&out.join("checkpoint.gbst"), model, cfg)?;
    Ok(ema.value().unwrap_or(f64::NAN))
}

fn pretrain(cli: &Cli) -> Result<u8> {
    let mut cfg = load_config(cli, RunConfig::default())?;
    let text = match &cfg.corpus {
        CorpusSource::Bundled => TOY_CORPUS.to_string(),
        CorpusSource::File(path) => read_text(path, "corpus")?,
    };
    let corpus = Corpus::from_text(&text)?;
    let mut model = match &cfg.init_checkpoint {
        Some(path) => {
            let (_, model) = load_checkpoint(path)?;
            cfg.model = model.config().clone();
            model
        }
        None => Model::new(cfg.model.clone(), cfg.train.seed)?,
    };
    prepare_out(&cli.out, &cfg)?;
    eprintln!("pre-training {} parameters on {} corpus bytes", model.num_parameters(), corpus.len());
    let ema = train_with_log(&cli.out, &cfg, &mut model, |m, on_step| training::pretrain(m, &corpus, &cfg.train, on_step))?;
    println!("final EMA loss {ema:.4} nats/byte after {} steps", model.step);
    Ok(0)
}

fn finetune(cli: &Cli, data: Option<&Path>, init: Option<&Path>) -> Result<u8> {
    let mut cfg = load_config(cli, RunConfig::finetune_defaults())?;
    if let Some(p) = data {
        cfg.finetune_data = Some(p.to_path_buf());
    }
    if let Some(p) = init {
        cfg.init_checkpoint = Some(p.to_path_buf());
    }
    let data_path = cfg
        .finetune_data
        .clone()
        .ok_or_else(|| Error::Config("no fine-tuning data: pass --data or set data.finetune".into()))?;
    let examples = training::parse_labelled(&read_text(&data_path, "fine-tuning data")?)?;
    let mut model = match &cfg.init_checkpoint {
        Some(path) => {
            let (_, mut model) = load_checkpoint(path)?;
            cfg.model = model.config().clone();
            model.step = 0;
            model
        }
        None => Model::new(cfg.model.clone(), cfg.train.seed)?,
    };
    prepare_out(&cli.out, &cfg)?;
    let ema = train_with_log(&cli.out, &cfg, &mut model, |m, on_step| training::finetune(m, &examples, &cfg.train, on_step))?;
    let metrics = training::evaluate(&model, &examples)?;
    let report = format!(
        "nats_per_byte\t{:.6}\nexact_span_match_rate\t{:.6}\n",
        metrics.nats_per_byte, metrics.exact_span_match_rate
    );
    fs::write(cli.out.join("eval.tsv"), &report)?;
    println!("final EMA loss {ema:.4}");
    print!("{report}");
    Ok(0)
}

fn score_viz(cli: &Cli, checkpoint: Option<&Path>, file: Option<&Path>, text: Option<&str>) -> Result<u8> {
    let (cfg, model) = match checkpoint {
        Some(path) => load_checkpoint(path)?,
        None => {
            let cfg = load_config(cli, RunConfig::default())?;
            let model = Model::new(cfg.model.clone(), cfg.train.seed)?;
            (cfg, model)
        }
    };
    let mut seq = match (file, text) {
        (Some(path), _) => bytes::encode_bytes(&fs::read(path)?)?,
        (None, Some(t)) => bytes::encode(t),
        (None, None) => return Err(Error::Config("score-viz needs TEXT or --file".into())),
    };
    if seq.is_empty() {
        return Err(Error::Config("score-viz needs non-empty text".into()));
    }
    let limit = model.config().max_input_bytes();
    if seq.len() > limit {
        eprintln!("warning: input of {} bytes truncated to the model maximum of {limit}", seq.len());
        seq = ByteSequence::from_ids(seq.ids[..limit].to_vec());
    }
    let table = model
        .block_scores(&seq)?
        .ok_or_else(|| Error::Config("the identity frontend has no block scores".into()))?;
    prepare_out(&cli.out, &cfg)?;
    let tsv = ScoreTable::to_tsv(&table.weights, &table.labels);
    let heatmap = ScoreTable::ascii_heatmap(&table.weights, &table.labels, &seq.ids);
    fs::write(cli.out.join("scores.tsv"), &tsv)?;
    fs::write(cli.out.join("heatmap.txt"), &heatmap)?;
    print!("{tsv}\n{heatmap}");
    if let Some(cal) = &table.calibrated {
        let tsv = ScoreTable::to_tsv(cal, &table.labels);
        fs::write(cli.out.join("scores_calibrated.tsv"), &tsv)?;
        print!("\ncalibrated\n{tsv}");
    }
    Ok(0)
}

fn gradcheck(cli: &Cli, fault: Option<&str>) -> Result<u8> {
    let cfg = load_config(cli, RunConfig::default())?;
    let fault: Option<BackwardFault> = fault.map(str::parse).transpose()?;
    prepare_out(&cli.out, &cfg)?;
    let gc = &cfg.gradcheck;
    let reports = gradcheck::check_model_seeds(&cfg.model, cfg.train.seed, gc, fault)?;
    let mut out = String::from("group\tmax_rel_error\tcoordinates\tstatus\n");
    for r in &reports {
        let status = if r.passed(gc.tolerance) { "ok" } else { "FAIL" };
        out.push_str(&format!("{}\t{:.3e}\t{}\t{status}\n", r.group, r.max_rel_error, r.checked));
    }
    fs::write(cli.out.join("gradcheck.tsv"), &out)?;
    print!("{out}");
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed(gc.tolerance)).map(|r| r.group).collect();
    if failed.is_empty() {
        println!("all groups below {:.0e} over {} seeds", gc.tolerance, gc.seeds);
        Ok(0)
    } else {
        eprintln!("gradient check failed for: {}", failed.join(", "));
        Ok(1)
    }
}

fn profile(cli: &Cli) -> Result<u8> {
    let cfg = load_config(cli, RunConfig::default())?;
    let p = &cfg.profile;
    if p.bench_steps > 0 && p.bench_steps < 10 {
        return Err(Error::Config(format!("profile.bench_steps must be 0 or ≥ 10, got {}", p.bench_steps)));
    }
    prepare_out(&cli.out, &cfg)?;
    let target = expected_target_len(p.length, cfg.train.corruption_rate, cfg.train.mean_span);
    let mut grid: Vec<(String, _)> = Vec::new();
    let mut base = cfg.model.clone();
    base.stack.max_source_len = base.stack.max_source_len.max(p.length);
    let mut identity = base.clone();
    identity.stack.frontend = Frontend::Identity;
    grid.push(("identity".to_string(), identity));
    for rate in 1..=4 {
        let mut m = base.clone();
        m.stack.frontend = Frontend::Gbst;
        m.gbst.downsample_rate = rate;
        grid.push((format!("gbst_ds{rate}"), m));
    }

    let bench_cfg = TrainConfig { batch_size: p.bench_batch, ..cfg.train.clone() };
    let mut table = String::from("config\tparams\tflops_forward\tflops_vs_identity\n");
    let mut timing = String::from("config\tsteps_per_second\tpeak_alloc_bytes\n");
    let mut identity_flops = 0u64;
    println!("L = {}, target length {target}", p.length);
    println!("{:<10} {:>10} {:>14} {:>8} {:>10} {:>10}", "config", "params", "flops", "ratio", "steps/s", "peak MB");
    for (name, model_cfg) in &grid {
        let report = count_flops(model_cfg, p.length, target)?;
        if name == "identity" {
            identity_flops = report.flops_forward;
        }
        let ratio = identity_flops as f64 / report.flops_forward as f64;
        fs::write(cli.out.join(format!("flops_{name}.tsv")), report.to_records())?;
        table.push_str(&format!("{name}\t{}\t{}\t{ratio:.4}\n", report.params, report.flops_forward));
        let (speed, peak) = if p.bench_steps > 0 {
            let mut model = Model::new(model_cfg.clone(), cfg.train.seed)?;
            let measured = benchmark_steps(&mut model, &bench_cfg, p.bench_steps, p.length)?;
            timing.push_str(&format!("{name}\t{:.4}\t{}\n", measured.steps_per_second, measured.peak_alloc_bytes));
            (
                format!("{:.3}", measured.steps_per_second),
                format!("{:.1}", measured.peak_alloc_bytes as f64 / (1024.0 * 1024.0)),
            )
        } else {
            ("-".to_string(), "-".to_string())
        };
        println!(
            "{name:<10} {:>10} {:>14.4e} {ratio:>8.3} {speed:>10} {peak:>10}",
            report.params, report.flops_forward as f64
        );
    }
    fs::write(cli.out.join("profile.tsv"), table)?;
    if p.bench_steps > 0 {
        fs::write(cli.out.join("timing.tsv"), timing)?;
    }
    Ok(0)
}

fn oracle_test(cli: &Cli, instances: usize) -> Result<u8> {
    let cfg = load_config(cli, RunConfig::default())?;
    prepare_out(&cli.out, &cfg)?;
    let report = oracle::run(instances, cfg.train.seed)?;
    let mut out = String::from("combination\tinstances\tmax_abs_diff\n");
    for c in &report.combos {
        out.push_str(&format!("{}\t{}\t{:.3e}\n", c.label(), c.instances, c.max_abs_diff));
    }
    fs::write(cli.out.join("oracle.tsv"), &out)?;
    print!("{out}");
    let worst = report.max_abs_diff();
    if worst <= ORACLE_TOLERANCE {
        println!("{} instances agree within {ORACLE_TOLERANCE:.0e} (worst {worst:.3e})", report.instances());
        Ok(0)
    } else {
        eprintln!("oracle mismatch: worst difference {worst:.3e} exceeds {ORACLE_TOLERANCE:.0e}");
        Ok(1)
    }
}
