//! Subcommands and their exit codes.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use cotrain_seg::metrics::{evaluate, evaluate_individual, evaluate_partial, MetricsTable};
use cotrain_seg::phantom::{generate_split, load_dataset, save_dataset, DatasetSplit};
use cotrain_seg::segnet::{load_checkpoint, save_checkpoint, CheckpointRole, ModelParams};
use cotrain_seg::trainer::{
    cotrain, generate_pseudo_dataset, metrics_csv_rows, pretrain_individual, select_final_model,
    IndividualModel, Mode, PseudoDataset, TrainLog, METRICS_CSV_HEADER,
};
use cotrain_seg::{Error, Result};

use crate::config::{CommandLine, EvalSplit, RunConfig};
use crate::report::{emit_ablation_report, load_summaries, RunSummary};

pub const COMMANDS: &[&str] = &[
    "gen-data",
    "pretrain",
    "pseudo-label",
    "cotrain",
    "eval",
    "report",
    "ablation",
];

pub const MANIFEST_FILE: &str = "manifest.txt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const ITERATIONS_FILE: &str = "iterations.csv";
pub const PSEUDO_FILE: &str = "pseudo.phv";
pub const TRUSTED_FILE: &str = "trusted.phv";
pub const FINAL_CHECKPOINT: &str = "final.ckp";

/// 2 configuration, 3 data or file format, 4 numeric failure, 1 anything else.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) => 2,
        Error::Format(_) | Error::Data(_) | Error::Shape { .. } => 3,
        Error::NonFinite { .. } | Error::Numeric(_) => 4,
        Error::Graph(_) => 1,
    }
}

/// Runs one command and maps the outcome to an exit code, printing a one-line
/// diagnostic on failure.
pub fn run_command<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<String>,
{
    let mut stdout = std::io::stdout().lock();
    match CommandLine::parse(argv).and_then(|cl| execute(&cl, &mut stdout)) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn execute(cl: &CommandLine, out: &mut dyn Write) -> Result<()> {
    let cfg = cl.resolve()?;
    match cl.command.as_str() {
        "gen-data" => gen_data(&cfg, out),
        "pretrain" => pretrain(&cfg, out),
        "pseudo-label" => pseudo_label(&cfg, out),
        "cotrain" => cotrain_cmd(&cfg, out),
        "eval" => eval(&cfg, out),
        "report" => report(&cfg, out),
        "ablation" => ablation(&cfg, out),
        "help" | "--help" | "-h" => {
            writeln!(out, "{}", usage())?;
            Ok(())
        }
        other => Err(Error::Config(format!(
            "unknown command {other:?}; expected one of {}",
            COMMANDS.join(", ")
        ))),
    }
}

pub fn usage() -> String {
    let mut s = format!(
        "usage: cotrain-seg <{}> [--config FILE] [--key value ...]\n\nkeys:\n",
        COMMANDS.join("|")
    );
    for (k, doc) in crate::config::KEYS {
        s.push_str(&format!("  --{k:<16} {doc}\n"));
    }
    s
}

fn require<'a>(p: &'a Option<PathBuf>, key: &str, command: &str) -> Result<&'a Path> {
    p.as_deref()
        .ok_or_else(|| Error::Config(format!("{command} needs --{key}")))
}

fn out_dir(cfg: &RunConfig, command: &str) -> Result<PathBuf> {
    let dir = require(&cfg.out, "out", command)?.to_path_buf();
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn load_split(cfg: &RunConfig, command: &str) -> Result<DatasetSplit> {
    let split = load_dataset(require(&cfg.data, "data", command)?)?;
    split.validate()?;
    Ok(split)
}

/// Effective configuration plus provenance comments.
fn write_manifest(dir: &Path, command: &str, cfg: &RunConfig, notes: &[String]) -> Result<()> {
    let mut text = format!("# command: {command}\n");
    for n in notes {
        text.push_str(&format!("# {n}\n"));
    }
    text.push_str(&cfg.to_text());
    fs::write(dir.join(MANIFEST_FILE), text)?;
    Ok(())
}

fn individual_path(dir: &Path, organ: usize) -> PathBuf {
    dir.join(format!("individual_{organ}.ckp"))
}

fn gen_data(cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    cfg.phantom.check()?;
    let path = require(&cfg.out, "out", "gen-data")?;
    let split = generate_split(cfg.train.seed, &cfg.phantom)?;
    save_dataset(&split, path)?;
    writeln!(
        out,
        "wrote {} training, {} validation and {} test images to {}",
        split.all_train().count(),
        split.validation.len(),
        split.test.len(),
        path.display()
    )?;
    Ok(())
}

fn train_individual(
    split: &DatasetSplit,
    cfg: &RunConfig,
    dir: &Path,
) -> Result<Vec<IndividualModel>> {
    let models = pretrain_individual(split, &cfg.train)?;
    for m in &models {
        save_checkpoint(
            &m.params,
            CheckpointRole::Student,
            individual_path(dir, m.organ as usize),
        )?;
    }
    Ok(models)
}

fn pretrain(cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    cfg.train.check()?;
    let split = load_split(cfg, "pretrain")?;
    let dir = out_dir(cfg, "pretrain")?;
    let models = train_individual(&split, cfg, &dir)?;
    let params: Vec<ModelParams> = models.iter().map(|m| m.params.clone()).collect();
    let table = evaluate_individual(&params, &split.test)?;
    let last = |m: &IndividualModel| m.log.epochs.last().cloned();
    let mut csv = format!("{METRICS_CSV_HEADER}\n");
    if let Some(e) = models.first().and_then(last) {
        csv.push_str(&metrics_csv_rows(
            e.epoch, "test", &table, &e.losses, e.lr, e.rampup,
        ));
    }
    fs::write(dir.join(METRICS_FILE), csv)?;
    let summary = RunSummary {
        mode: Mode::Individual,
        seed: cfg.train.seed,
        table: table.clone(),
    };
    summary.save(&dir)?;
    let notes: Vec<String> = params
        .iter()
        .enumerate()
        .map(|(k, p)| format!("individual_{} fingerprint: {}", k + 1, p.fingerprint()))
        .collect();
    write_manifest(&dir, "pretrain", cfg, &notes)?;
    writeln!(out, "individual models, test split\n{}", table.to_text())?;
    Ok(())
}

fn load_individual(dir: &Path, organs: usize) -> Result<Vec<ModelParams>> {
    (1..=organs)
        .map(|k| Ok(load_checkpoint(individual_path(dir, k))?.params))
        .collect()
}

fn pseudo_label(cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let split = load_split(cfg, "pseudo-label")?;
    let models = load_individual(
        require(&cfg.models, "models", "pseudo-label")?,
        split.organs,
    )?;
    let dir = out_dir(cfg, "pseudo-label")?;
    let pseudo = generate_pseudo_dataset(&models, &split)?;
    save_pseudo(&dir, &pseudo, &split)?;
    write_manifest(&dir, "pseudo-label", cfg, &[])?;
    writeln!(
        out,
        "wrote fused labels for {} images to {}",
        split.all_train().count(),
        dir.join(PSEUDO_FILE).display()
    )?;
    Ok(())
}

fn save_pseudo(dir: &Path, pseudo: &PseudoDataset, split: &DatasetSplit) -> Result<()> {
    save_dataset(&pseudo.to_split(split)?, dir.join(PSEUDO_FILE))?;
    save_dataset(split, dir.join(TRUSTED_FILE))
}

fn load_pseudo(dir: &Path) -> Result<(DatasetSplit, PseudoDataset)> {
    let trusted = load_dataset(dir.join(TRUSTED_FILE))?;
    trusted.validate()?;
    let fused = load_dataset(dir.join(PSEUDO_FILE))?;
    let pseudo = PseudoDataset::from_split(&fused, &trusted)?;
    Ok((trusted, pseudo))
}

/// Outcome of one co-training run, as written to its directory.
pub struct CotrainRun {
    pub summary: RunSummary,
    pub log: TrainLog,
}

/// Trains one mode and writes checkpoints, logs, summary and manifest to `dir`.
pub fn run_cotrain(
    cfg: &RunConfig,
    split: &DatasetSplit,
    pseudo: &PseudoDataset,
    dir: &Path,
) -> Result<CotrainRun> {
    let result = cotrain(split, pseudo, &cfg.train)?;
    let mut notes = Vec::new();
    for (i, net) in result.nets.iter().enumerate() {
        let name = format!("net{}", i + 1);
        save_checkpoint(
            &net.student,
            CheckpointRole::Student,
            dir.join(format!("{name}.ckp")),
        )?;
        if let Some(ema) = &net.averaged {
            ema.save(dir.join(format!("{name}_avg.ckp")))?;
        }
        notes.push(format!("{name} fingerprint: {}", net.student.fingerprint()));
    }
    let candidates: Vec<&ModelParams> = result.nets.iter().map(|n| n.candidate()).collect();
    let (best, val_tables) = select_final_model(&candidates, &split.validation)?;
    let chosen = &result.nets[best];
    let role = match &chosen.averaged {
        Some(e) => CheckpointRole::Averaged(cotrain_seg::segnet::EmaHeader {
            alpha: e.alpha(),
            step: e.step(),
        }),
        None => CheckpointRole::Student,
    };
    save_checkpoint(chosen.candidate(), role, dir.join(FINAL_CHECKPOINT))?;
    for (i, t) in val_tables.iter().enumerate() {
        notes.push(format!(
            "candidate net{} validation avg DSC: {:.2}",
            i + 1,
            100.0 * t.avg_dsc()
        ));
    }
    notes.push(format!("final model: net{}", best + 1));

    let test = evaluate(chosen.candidate(), &split.test)?;
    let mut csv = format!("{METRICS_CSV_HEADER}\n");
    csv.push_str(&result.log.metrics_csv_rows());
    if let Some(e) = result.log.epochs.last() {
        csv.push_str(&metrics_csv_rows(
            e.epoch, "test", &test, &e.losses, e.lr, e.rampup,
        ));
    }
    fs::write(dir.join(METRICS_FILE), csv)?;
    fs::write(dir.join(ITERATIONS_FILE), result.log.iterations_csv())?;
    let summary = RunSummary {
        mode: cfg.train.mode,
        seed: cfg.train.seed,
        table: test,
    };
    summary.save(dir)?;
    write_manifest(dir, "cotrain", cfg, &notes)?;
    Ok(CotrainRun {
        summary,
        log: result.log,
    })
}

fn cotrain_cmd(cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    cfg.train.check()?;
    if cfg.train.mode == Mode::Individual {
        return Err(Error::Config(
            "mode individual is produced by the pretrain command".into(),
        ));
    }
    let dir = out_dir(cfg, "cotrain")?;
    let (split, pseudo) = match &cfg.pseudo {
        Some(p) => load_pseudo(p)?,
        None => {
            let split = load_split(cfg, "cotrain")?;
            let models = train_individual(&split, cfg, &dir)?;
            let params: Vec<ModelParams> = models.into_iter().map(|m| m.params).collect();
            let pseudo = generate_pseudo_dataset(&params, &split)?;
            (split, pseudo)
        }
    };
    let run = run_cotrain(cfg, &split, &pseudo, &dir)?;
    writeln!(
        out,
        "mode {}, test split\n{}",
        cfg.train.mode,
        run.summary.table.to_text()
    )?;
    Ok(())
}

fn eval(cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let split = load_split(cfg, "eval")?;
    let models: Vec<ModelParams> = match (&cfg.checkpoint, &cfg.models) {
        (Some(ck), _) => vec![load_checkpoint(ck)?.params],
        (None, Some(dir)) => load_individual(dir, split.organs)?,
        (None, None) => {
            return Err(Error::Config("eval needs --checkpoint or --models".into()));
        }
    };
    let individual = models.len() > 1 || models[0].arch().classes == 2;
    if !individual && models[0].arch().organs() != split.organs {
        return Err(Error::Data(format!(
            "checkpoint predicts {} organs but the dataset has {}",
            models[0].arch().organs(),
            split.organs
        )));
    }
    let table: MetricsTable = match (cfg.split, individual) {
        (EvalSplit::Train, _) => evaluate_partial(&models, &split.train)?,
        (EvalSplit::Validation, false) => evaluate(&models[0], &split.validation)?,
        (EvalSplit::Test, false) => evaluate(&models[0], &split.test)?,
        (EvalSplit::Validation, true) => evaluate_individual(&models, &split.validation)?,
        (EvalSplit::Test, true) => evaluate_individual(&models, &split.test)?,
    };
    writeln!(out, "split {}\n{}", cfg.split.as_str(), table.to_text())?;
    Ok(())
}

fn report(cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    if cfg.runs.is_empty() {
        return Err(Error::Config("report needs --runs".into()));
    }
    let runs = load_summaries(&cfg.runs)?;
    if runs.is_empty() {
        return Err(Error::Data("no run summaries found".into()));
    }
    let rep = emit_ablation_report(&runs)?;
    if let Some(dir) = &cfg.out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("report.txt"), rep.to_text())?;
        fs::write(dir.join("report.csv"), rep.to_csv())?;
    }
    write!(out, "{}", rep.to_text())?;
    Ok(())
}

/// Every finished run of an ablation, with the training logs of the co-training runs.
#[derive(Debug, Clone, Default)]
pub struct AblationRuns {
    pub summaries: Vec<RunSummary>,
    pub logs: Vec<(u64, Mode, TrainLog)>,
}

/// Runs every mode for every seed; each run lands in `out/seed_<s>/<mode>/`.
pub fn run_ablation(cfg: &RunConfig, progress: &mut dyn Write) -> Result<AblationRuns> {
    cfg.check()?;
    if cfg.seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    let root = out_dir(cfg, "ablation")?;
    let mut runs = AblationRuns::default();
    for &seed in &cfg.seeds {
        let mut seed_cfg = cfg.clone();
        seed_cfg.train.seed = seed;
        let split = generate_split(seed, &cfg.phantom)?;
        let seed_dir = root.join(format!("seed_{seed}"));

        let ind_dir = seed_dir.join(Mode::Individual.as_str());
        fs::create_dir_all(&ind_dir)?;
        let mut ind_cfg = seed_cfg.clone();
        ind_cfg.train.mode = Mode::Individual;
        ind_cfg.out = Some(ind_dir.clone());
        let models = train_individual(&split, &ind_cfg, &ind_dir)?;
        let params: Vec<ModelParams> = models.into_iter().map(|m| m.params).collect();
        let table = evaluate_individual(&params, &split.test)?;
        let summary = RunSummary {
            mode: Mode::Individual,
            seed,
            table,
        };
        summary.save(&ind_dir)?;
        write_manifest(&ind_dir, "pretrain", &ind_cfg, &[])?;
        writeln!(
            progress,
            "seed {seed} individual: {:.2}",
            100.0 * summary.table.avg_dsc()
        )?;
        runs.summaries.push(summary);

        let pseudo = generate_pseudo_dataset(&params, &split)?;
        for mode in Mode::ALL.into_iter().skip(1) {
            let mut mode_cfg = seed_cfg.clone();
            mode_cfg.train.mode = mode;
            if mode != Mode::CtWaRm {
                mode_cfg.train.mask_reading = cotrain_seg::losses::MaskReading::Selective;
            }
            let dir = seed_dir.join(mode.as_str());
            fs::create_dir_all(&dir)?;
            mode_cfg.out = Some(dir.clone());
            let run = run_cotrain(&mode_cfg, &split, &pseudo, &dir)?;
            writeln!(
                progress,
                "seed {seed} {mode}: {:.2}",
                100.0 * run.summary.table.avg_dsc()
            )?;
            runs.summaries.push(run.summary);
            runs.logs.push((seed, mode, run.log));
        }
    }
    Ok(runs)
}

fn ablation(cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let runs = run_ablation(cfg, out)?;
    let rep = emit_ablation_report(&runs.summaries)?;
    let root = require(&cfg.out, "out", "ablation")?;
    fs::write(root.join("ablation.txt"), rep.to_text())?;
    fs::write(root.join("ablation.csv"), rep.to_csv())?;
    write_manifest(root, "ablation", cfg, &[])?;
    write!(out, "{}", rep.to_text())?;
    Ok(())
}
