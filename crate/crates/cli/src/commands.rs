use std::collections::BTreeSet;
use std::path::Path;
use std::str::FromStr;

use drivesql::evaluation::{
    evaluate, split_dataset, EvalOptions, Prediction, DEFAULT_IOU_THRESHOLD, DEFAULT_SPLIT_RATIOS,
};
use drivesql::generation::{
    generate_dataset, verify_pairs, GenerationConfig, InstructionResponsePair, VerifierConfig,
    DEFAULT_VERIFIER_RETRIES, DEFAULT_VERIFIER_TIMEOUT_SECS,
};
use drivesql::jsonio;
use drivesql::scene_db::DEFAULT_IMPORTANT_RADIUS;
use drivesql::statistics::{compute_stats, view_percent_csv};
use drivesql::synth::{curated_scenarios, random_corpus, synth_corpus, SceneScript};
use drivesql::task_sql::{PredicateMode, SubtaskKind};
use drivesql::{build_database, CanonicalAnnotations, SceneDatabase};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{CliError, CliResult};
use crate::manifest::{manifest_path_for, Run};
use crate::settings::{load_thresholds, resolve, CommaList, KeyValueFile};
use crate::{
    BuildDbArgs, Cli, Command, EvalArgs, GenerateArgs, GtPredictionsArgs, SplitArgs, StatsArgs,
    SynthArgs, VerifierArgs, VerifyArgs,
};

const SETTING_KEYS: [&str; 16] = [
    "bleu-smoothing",
    "db",
    "iou",
    "jobs",
    "max-instances",
    "predicate-mode",
    "radius",
    "random",
    "ratios",
    "seed",
    "subtasks",
    "thresholds",
    "verifier",
    "verifier-retries",
    "verifier-timeout",
    "windows",
];

pub fn run(cli: Cli) -> CliResult<()> {
    let file = match &cli.config {
        Some(path) => {
            let f = KeyValueFile::load(path)?;
            f.reject_unknown(&SETTING_KEYS)?;
            Some(f)
        }
        None => None,
    };
    let file = file.as_ref();
    match cli.command {
        Command::Synth(a) => synth(a, file),
        Command::BuildDb(a) => build_db(a, file),
        Command::Generate(a) => generate(a, file),
        Command::Verify(a) => verify(a, file),
        Command::Split(a) => split(a, file),
        Command::Stats(a) => stats(a),
        Command::Eval(a) => eval(a, file),
        Command::GtPredictions(a) => gt_predictions(a),
    }
}

struct Mode(PredicateMode);

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "corrected" => Ok(Mode(PredicateMode::Corrected)),
            "literal" => Ok(Mode(PredicateMode::Literal)),
            other => Err(format!(
                "unknown predicate mode '{other}' (expected corrected or literal)"
            )),
        }
    }
}

fn parse_json<T: DeserializeOwned>(path: &Path, text: &str) -> CliResult<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|err| {
        let inner = err.inner();
        CliError::in_file(
            path,
            format_args!(
                "line {} column {}: field `{}`: {inner}",
                inner.line(),
                inner.column(),
                err.path()
            ),
        )
    })
}

fn read_jsonl<T: DeserializeOwned>(run: &mut Run, path: &Path) -> CliResult<Vec<T>> {
    let text = run.read(path)?;
    jsonio::from_jsonl_str(&text).map_err(|e| CliError::jsonl(path, e))
}

fn load_db(run: &mut Run, path: &Path) -> CliResult<SceneDatabase> {
    let text = run.read(path)?;
    SceneDatabase::from_json_str(&text).map_err(|e| CliError::in_file(path, e))
}

fn write_jsonl<T: Serialize>(run: &mut Run, path: &Path, items: &[T]) -> CliResult<()> {
    run.write(path, jsonio::to_jsonl_string(items).as_bytes())
}

fn write_json<T: Serialize>(run: &mut Run, path: &Path, value: &T) -> CliResult<()> {
    let mut text = jsonio::to_sorted_string_pretty(value);
    text.push('\n');
    run.write(path, text.as_bytes())
}

fn verifier_config(args: VerifierArgs, file: Option<&KeyValueFile>) -> CliResult<VerifierConfig> {
    let Some(endpoint) = resolve(args.verifier, file, "verifier")? else {
        return Ok(VerifierConfig::OfflineRules);
    };
    Ok(VerifierConfig::ExternalClient {
        endpoint,
        timeout_secs: resolve(args.verifier_timeout, file, "verifier-timeout")?
            .unwrap_or(DEFAULT_VERIFIER_TIMEOUT_SECS),
        retries: resolve(args.verifier_retries, file, "verifier-retries")?
            .unwrap_or(DEFAULT_VERIFIER_RETRIES),
    })
}

fn synth(a: SynthArgs, file: Option<&KeyValueFile>) -> CliResult<()> {
    let mut run = Run::new("synth");
    let mut scenes: Vec<SceneScript> = Vec::new();
    if let Some(path) = &a.scripts {
        let text = run.read(path)?;
        scenes.extend(parse_json::<Vec<SceneScript>>(path, &text)?);
    }
    if a.curated {
        scenes.extend(curated_scenarios());
    }
    let random = resolve(a.random, file, "random")?.unwrap_or(0);
    let seed = resolve(a.seed, file, "seed")?.unwrap_or(0);
    if random > 0 {
        scenes.extend(random_corpus("rand", random, seed));
    }
    if scenes.is_empty() {
        return Err(CliError::Validation(
            "no scenes: give a scripts file, --curated or --random N".into(),
        ));
    }
    run.set_config(&(a.curated, random, seed));
    let annotations = synth_corpus(&scenes).map_err(|e| CliError::Validation(e.to_string()))?;
    run.write(&a.output, annotations.to_json_string().as_bytes())?;
    if let Some(path) = &a.scripts_out {
        write_json(&mut run, path, &scenes)?;
    }
    eprintln!("synthesized {} scenes", scenes.len());
    run.finish(&manifest_path_for(&a.output))?;
    Ok(())
}

fn build_db(a: BuildDbArgs, file: Option<&KeyValueFile>) -> CliResult<()> {
    let mut run = Run::new("build-db");
    let radius = resolve(a.radius, file, "radius")?.unwrap_or(DEFAULT_IMPORTANT_RADIUS);
    run.set_config(&radius);
    let text = run.read(&a.annotations)?;
    let annotations = CanonicalAnnotations::from_json_str(&text)
        .map_err(|e| CliError::in_file(&a.annotations, e))?;
    let db =
        build_database(annotations, radius).map_err(|e| CliError::in_file(&a.annotations, e))?;
    run.write(&a.output, db.to_json_string().as_bytes())?;
    eprintln!(
        "{} scenes, {} frames, {} instance records",
        db.scenes().count(),
        db.frames().count(),
        db.instance_count()
    );
    run.finish(&manifest_path_for(&a.output))?;
    Ok(())
}

fn generate(a: GenerateArgs, file: Option<&KeyValueFile>) -> CliResult<()> {
    let mut run = Run::new("generate");
    let mut config = GenerationConfig::default();
    if let Some(seed) = resolve(a.seed, file, "seed")? {
        config.master_seed = seed;
    }
    if let Some(w) = resolve(a.windows, file, "windows")? {
        config.windows_per_scene = w;
    }
    if let Some(m) = resolve(a.max_instances, file, "max-instances")? {
        config.max_instances_per_subtask = m;
    }
    if let Some(path) = resolve(a.thresholds, file, "thresholds")? {
        config.thresholds = load_thresholds(&path)?;
    }
    if let Some(list) = resolve(a.subtasks, file, "subtasks")? {
        let CommaList(kinds) = list
            .parse::<CommaList<SubtaskKind>>()
            .map_err(|e| CliError::Validation(format!("--subtasks: {e}")))?;
        config.enabled_subtasks = kinds.into_iter().collect::<BTreeSet<_>>();
    }
    if let Some(Mode(m)) = resolve(
        a.predicate_mode
            .map(|s| s.parse::<Mode>())
            .transpose()
            .map_err(|e| CliError::Validation(format!("--predicate-mode: {e}")))?,
        file,
        "predicate-mode",
    )? {
        config.predicate_mode = m;
    }
    config.verifier = verifier_config(a.verifier, file)?;
    let jobs = resolve(a.jobs, file, "jobs")?;
    config
        .validate()
        .map_err(|e| CliError::Validation(e.to_string()))?;
    run.set_config(&config);

    let db = load_db(&mut run, &a.db)?;
    let (pairs, diag) =
        generate_dataset(&db, &config, jobs).map_err(|e| CliError::Validation(e.to_string()))?;
    let generated = pairs.len();
    let outcome = verify_pairs(pairs, &config.verifier, Some(&db));
    write_jsonl(&mut run, &a.output, &outcome.kept)?;
    eprintln!(
        "{generated} pairs generated, {} kept, {} rejected, {} unverified; diagnostics: {}",
        outcome.kept.len(),
        outcome.rejected.len(),
        outcome.unverified,
        jsonio::to_sorted_string(&diag)
    );
    for r in &outcome.rejected {
        eprintln!("rejected {}: {}", r.pair_id, r.reason);
    }
    run.finish(&manifest_path_for(&a.output))?;
    Ok(())
}

fn verify(a: VerifyArgs, file: Option<&KeyValueFile>) -> CliResult<()> {
    let mut run = Run::new("verify");
    let verifier = verifier_config(a.verifier, file)?;
    run.set_config(&verifier);
    let pairs: Vec<InstructionResponsePair> = read_jsonl(&mut run, &a.pairs)?;
    let db = match resolve(a.db, file, "db")? {
        Some(path) => Some(load_db(&mut run, &path)?),
        None => None,
    };
    let total = pairs.len();
    let outcome = verify_pairs(pairs, &verifier, db.as_ref());
    write_jsonl(&mut run, &a.output, &outcome.kept)?;
    if let Some(path) = &a.rejected {
        write_jsonl(&mut run, path, &outcome.rejected)?;
    }
    eprintln!(
        "{total} pairs: {} kept ({} revised, {} unverified), {} rejected",
        outcome.kept.len(),
        outcome.revised,
        outcome.unverified,
        outcome.rejected.len()
    );
    for e in &outcome.client_errors {
        eprintln!("verifier: {e}");
    }
    run.finish(&manifest_path_for(&a.output))?;
    Ok(())
}

fn split(a: SplitArgs, file: Option<&KeyValueFile>) -> CliResult<()> {
    let mut run = Run::new("split");
    let ratios = match resolve(a.ratios, file, "ratios")? {
        Some(text) => {
            let CommaList(v) = text
                .parse::<CommaList<f64>>()
                .map_err(|e| CliError::Validation(format!("--ratios: {e}")))?;
            <[f64; 3]>::try_from(v).map_err(|v| {
                CliError::Validation(format!("--ratios needs three values, got {}", v.len()))
            })?
        }
        None => DEFAULT_SPLIT_RATIOS,
    };
    let seed = resolve(a.seed, file, "seed")?.unwrap_or(0);
    run.set_config(&(ratios, seed));
    let pairs: Vec<InstructionResponsePair> = read_jsonl(&mut run, &a.pairs)?;
    let scenes: Vec<String> = pairs
        .iter()
        .map(|p| p.scene_id.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let parts = split_dataset(&scenes, ratios, seed).map_err(|e| CliError::in_file(&a.pairs, e))?;
    for (name, ids) in [
        ("train", &parts.train),
        ("val", &parts.val),
        ("test", &parts.test),
    ] {
        let ids: BTreeSet<&str> = ids.iter().map(String::as_str).collect();
        let subset: Vec<&InstructionResponsePair> = pairs
            .iter()
            .filter(|p| ids.contains(p.scene_id.as_str()))
            .collect();
        write_jsonl(&mut run, &a.output.join(format!("{name}.jsonl")), &subset)?;
    }
    write_json(&mut run, &a.output.join("split.json"), &parts)?;
    eprintln!(
        "scenes: {} train, {} val, {} test",
        parts.train.len(),
        parts.val.len(),
        parts.test.len()
    );
    run.finish(&a.output.join("manifest.json"))?;
    Ok(())
}

fn stats(a: StatsArgs) -> CliResult<()> {
    let mut run = Run::new("stats");
    let pairs: Vec<InstructionResponsePair> = read_jsonl(&mut run, &a.pairs)?;
    let db = load_db(&mut run, &a.db)?;
    let stats = compute_stats(&pairs, &db).map_err(|e| CliError::in_file(&a.pairs, e))?;
    write_json(&mut run, &a.output, &stats)?;
    if let Some(path) = &a.csv {
        run.write(path, view_percent_csv(&stats).as_bytes())?;
    }
    run.finish(&manifest_path_for(&a.output))?;
    Ok(())
}

fn eval(a: EvalArgs, file: Option<&KeyValueFile>) -> CliResult<()> {
    let mut run = Run::new("eval");
    let options = EvalOptions {
        iou_threshold: resolve(a.iou, file, "iou")?.unwrap_or(DEFAULT_IOU_THRESHOLD),
        bleu_smoothing: resolve(a.bleu_smoothing, file, "bleu-smoothing")?.unwrap_or(false),
    };
    if !(options.iou_threshold > 0.0 && options.iou_threshold <= 1.0) {
        return Err(CliError::Validation(format!(
            "--iou must be in (0, 1], got {}",
            options.iou_threshold
        )));
    }
    run.set_config(&(options.iou_threshold, options.bleu_smoothing));
    let pairs: Vec<InstructionResponsePair> = read_jsonl(&mut run, &a.pairs)?;
    let preds: Vec<Prediction> = read_jsonl(&mut run, &a.predictions)?;
    let report =
        evaluate(&pairs, &preds, &options).map_err(|e| CliError::in_file(&a.predictions, e))?;
    write_json(&mut run, &a.output, &report)?;
    run.finish(&manifest_path_for(&a.output))?;
    if !report.undefined_groups.is_empty() {
        return Err(CliError::Validation(format!(
            "undefined metric groups: {}",
            report.undefined_groups.join(", ")
        )));
    }
    Ok(())
}

fn gt_predictions(a: GtPredictionsArgs) -> CliResult<()> {
    let mut run = Run::new("gt-predictions");
    let pairs: Vec<InstructionResponsePair> = read_jsonl(&mut run, &a.pairs)?;
    let preds: Vec<Prediction> = pairs.iter().map(Prediction::from_ground_truth).collect();
    write_jsonl(&mut run, &a.output, &preds)?;
    run.finish(&manifest_path_for(&a.output))?;
    Ok(())
}
