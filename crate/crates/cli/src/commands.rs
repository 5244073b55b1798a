use std::collections::HashSet;
use std::io::Write;
use std::path::Path;

use anyhow::{bail, Context, Result};
use attncomp::annotate::{write_records, AnnotationConfig, AnnotationOutcome, Annotator, MatchPolicy};
use attncomp::confidence::{calibration_report, BinMode};
use attncomp::corpus::{read_dataset, Document, Granularity, QuerySample};
use attncomp::eval::{compressed_documents, read_records, run_eval, EvalRecord, RunConfig};
use attncomp::gradcheck;
use attncomp::provider::bundle::load_bundle;
use attncomp::provider::ProviderMode;
use attncomp::provider::synthetic::{negatives_for, synthetic_dataset, DatasetShape};
use attncomp::rng::derive_seed;
use attncomp::trainer::{train, write_loss_log, TrainingInstance};
use attncomp::{
    generator, AttentionProvider, BundleProvider, CrossAttentionHead, Error, Scorer, SyntheticParams,
    SyntheticProvider, TopPConfig,
};

use crate::config::{resolve_seed, TrainFile};
use crate::{Command, Status};

pub fn run(command: Command) -> Result<Status> {
    match command {
        Command::Compress {
            dataset,
            provider,
            weights,
            granularity,
            top_p,
            epsilon,
            seed,
            out,
        } => {
            let seed = resolve_seed(seed, 0)?;
            let granularity: Granularity = granularity.parse()?;
            let config = RunConfig {
                granularity,
                topp: topp(granularity, top_p, epsilon)?,
                seed,
                ..RunConfig::default()
            };
            let samples = read_dataset(&dataset)?;
            let provider = make_provider(&provider, seed)?;
            let head = load_weights(weights.as_deref())?;
            let scorer = scorer(provider.as_ref(), head.as_ref(), granularity)?;
            let report = run_eval(&samples, &scorer, None, &config)?;
            report.write(&out)?;
            let mut compressed = String::new();
            let mut records = report.records.iter().peekable();
            for (i, sample) in samples.iter().enumerate() {
                let id = record_id(sample, i);
                let Some(record) = records.next_if(|r| r.id == id) else {
                    continue;
                };
                let docs = compressed_documents(sample, &record.kept, granularity);
                let line = QuerySample {
                    documents: docs,
                    relevance_labels: None,
                    ..sample.clone()
                };
                compressed.push_str(&serde_json::to_string(&line)?);
                compressed.push('\n');
            }
            write_file(&out.join("compressed.jsonl"), &compressed)?;
            summarize(&report.aggregate());
            Ok(status(report.failures.len()))
        }
        Command::Train {
            dataset,
            config,
            seed,
            out,
        } => {
            let mut file = match config {
                Some(path) => TrainFile::read(&path)?,
                None => TrainFile::default(),
            };
            file.train.seed = resolve_seed(seed, file.train.seed)?;
            let data = training_data(&dataset, &file)?;
            let d_model = data[0].bundle.d_model();
            let init = match &file.init_weights {
                Some(path) => CrossAttentionHead::init_from_export(path)?,
                None => CrossAttentionHead::init_random(file.heads, d_model, file.d_a, derive_seed(file.train.seed, "init"))?,
            };
            let outcome = train(&data, &file.train, init)?;
            outcome.head.save(&out)?;
            write_loss_log(&out.join("loss_log.csv"), &outcome.log)?;
            if let Some(last) = outcome.log.last() {
                println!(
                    "{} steps, final l_doc {:.6} l_ins {:.6} total {:.6}",
                    outcome.steps, last.l_doc, last.l_ins, last.total
                );
            }
            Ok(Status::Done)
        }
        Command::Annotate {
            dataset,
            generator,
            shuffles,
            top_p,
            epsilon,
            provider,
            weights,
            corpus,
            seed,
            out,
        } => {
            let seed = resolve_seed(seed, 0)?;
            let samples = read_dataset(&dataset)?;
            if samples.is_empty() {
                return Err(Error::NoSamples.into());
            }
            let pool = match corpus {
                Some(path) => document_pool(&read_dataset(&path)?),
                None => document_pool(&samples),
            };
            let provider = make_provider(&provider, seed)?;
            let head = load_weights(weights.as_deref())?;
            let scorer = scorer(provider.as_ref(), head.as_ref(), Granularity::DocumentLevel)?;
            let generator = generator::from_address(&generator)?;
            let annotator = Annotator {
                compressor: &scorer,
                generator: generator.as_ref(),
                corpus: &pool,
                config: AnnotationConfig {
                    shuffles,
                    p: top_p,
                    epsilon,
                    seed,
                    ..AnnotationConfig::default()
                },
            };
            annotator.config.validate()?;
            let (mut records, mut failures, mut discarded) = (Vec::new(), 0, 0);
            for (i, sample) in samples.iter().enumerate() {
                match annotator.annotate(sample) {
                    Ok(AnnotationOutcome::Discarded) => discarded += 1,
                    Ok(outcome) => records.extend(outcome.record()),
                    Err(e) => {
                        failures += 1;
                        eprintln!("sample {}: {e}", record_id(sample, i));
                    }
                }
            }
            write_records(&out, &records)?;
            let positives = records.iter().filter(|r| r.variant == "positive").count();
            println!(
                "{positives} positive, {} negative, {discarded} discarded, {failures} failed",
                records.len() - positives
            );
            Ok(status(failures))
        }
        Command::Evaluate {
            dataset,
            weights,
            generator,
            provider,
            granularity,
            top_p,
            epsilon,
            accuracy,
            parallelism,
            seed,
            report,
        } => {
            let seed = resolve_seed(seed, 0)?;
            let granularity: Granularity = granularity.parse()?;
            let policy: MatchPolicy = accuracy.parse()?;
            let config = RunConfig {
                granularity,
                topp: topp(granularity, top_p, epsilon)?,
                parallelism,
                seed,
                policy,
            };
            let samples = read_dataset(&dataset)?;
            let provider = make_provider(&provider, seed)?;
            let head = load_weights(weights.as_deref())?;
            let scorer = scorer(provider.as_ref(), head.as_ref(), granularity)?;
            let generator = generator.as_deref().map(generator::from_address).transpose()?;
            let result = run_eval(&samples, &scorer, generator.as_deref(), &config)?;
            result.write(&report)?;
            summarize(&result.aggregate());
            Ok(status(result.failures.len()))
        }
        Command::ConfidenceReport {
            records,
            metric,
            mode,
            out,
        } => {
            let mode: BinMode = mode.parse()?;
            let pick: fn(&EvalRecord) -> Option<f64> = match metric.as_str() {
                "f1" => |r| r.f1,
                "accuracy" => |r| r.accuracy,
                "answerable" => |r| r.answerable.map(|a| if a { 1.0 } else { 0.0 }),
                other => bail!(Error::Invalid(format!("unknown metric `{other}`"))),
            };
            let records = read_records(&records)?;
            let pairs = records
                .iter()
                .map(|r| {
                    pick(r)
                        .map(|m| (r.confidence, m))
                        .ok_or_else(|| Error::Invalid(format!("record `{}` has no {metric}", r.id)))
                })
                .collect::<attncomp::Result<Vec<_>>>()?;
            let report = calibration_report(&pairs, mode)?;
            report.write_csv(&out)?;
            println!(
                "pearson_r {} over {} samples{}",
                report.pearson_r,
                report.samples,
                if report.degenerate { " (degenerate)" } else { "" }
            );
            Ok(Status::Done)
        }
        Command::Gradcheck { seed, instances } => {
            let seed = resolve_seed(Some(seed), seed)?;
            let reports = gradcheck::run(seed, instances)?;
            let failed = reports.iter().filter(|r| !r.passed()).count();
            let worst = reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
            let entries: usize = reports.iter().map(|r| r.entries).sum();
            println!(
                "{} instances, {entries} entries, max relative error {worst:.3e}, {failed} failed (tolerance {:e})",
                reports.len(),
                gradcheck::REL_TOLERANCE
            );
            Ok(status(failed))
        }
        Command::Synth {
            positives,
            negatives,
            docs,
            relevant,
            seed,
            out,
        } => {
            let seed = resolve_seed(seed, 0)?;
            let (lo, hi) = match relevant.split_once("..") {
                Some((a, b)) => (a.trim().parse()?, b.trim().parse()?),
                None => {
                    let n = relevant.trim().parse()?;
                    (n, n)
                }
            };
            if lo > hi || hi > docs || docs == 0 {
                bail!(Error::Invalid(format!("bad relevant range {lo}..{hi} for {docs} documents")));
            }
            let shape = DatasetShape {
                docs_per_sample: docs,
                relevant_per_sample: (lo, hi),
                ..DatasetShape::default()
            };
            let samples = synthetic_dataset(positives, negatives.unwrap_or_else(|| negatives_for(positives)), &shape, seed);
            let mut body = String::new();
            for s in &samples {
                body.push_str(&serde_json::to_string(s)?);
                body.push('\n');
            }
            write_file(&out, &body)?;
            Ok(Status::Done)
        }
    }
}

fn status(failures: usize) -> Status {
    if failures == 0 {
        Status::Done
    } else {
        Status::Partial(failures)
    }
}

fn record_id(sample: &QuerySample, index: usize) -> String {
    sample.id.clone().unwrap_or_else(|| format!("#{index}"))
}

fn topp(granularity: Granularity, p: f64, epsilon: Option<f64>) -> attncomp::Result<TopPConfig> {
    let default = match granularity {
        Granularity::DocumentLevel => TopPConfig::default(),
        Granularity::SentenceLevel => TopPConfig::sentence_default(),
    };
    TopPConfig::new(p, epsilon.unwrap_or(default.epsilon))
}

fn make_provider(spec: &str, seed: u64) -> Result<Box<dyn AttentionProvider>> {
    if let Some(dir) = spec.strip_prefix("bundle:") {
        return Ok(Box::new(BundleProvider::new(dir)?));
    }
    if let Some(params) = spec.strip_prefix("synthetic:").or((spec == "synthetic").then_some("")) {
        return Ok(Box::new(SyntheticProvider::new(SyntheticParams::parse_inline(params)?, seed)?));
    }
    bail!(Error::Invalid(format!("unknown provider `{spec}`; expected bundle:DIR or synthetic:SPEC")))
}

fn scorer<'a>(
    provider: &'a dyn AttentionProvider,
    head: Option<&'a CrossAttentionHead>,
    granularity: Granularity,
) -> Result<Scorer<'a>> {
    if head.is_none() && !provider.supports(ProviderMode::RawAttention) {
        bail!(Error::Invalid("this provider yields hidden states; pass --weights".into()));
    }
    Ok(Scorer {
        provider,
        head,
        granularity,
    })
}

fn load_weights(path: Option<&Path>) -> Result<Option<CrossAttentionHead>> {
    path.map(|p| CrossAttentionHead::init_from_export(p).with_context(|| format!("loading weights from {}", p.display())))
        .transpose()
}

fn training_data(path: &Path, file: &TrainFile) -> Result<Vec<TrainingInstance>> {
    let data = if path.is_dir() {
        let mut dirs: Vec<_> = std::fs::read_dir(path)
            .with_context(|| format!("listing {}", path.display()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir())
            .collect();
        dirs.sort();
        dirs.iter()
            .map(|dir| -> Result<TrainingInstance> {
                let bundle = load_bundle(dir)?.hidden()?;
                let labels_path = dir.join("labels.json");
                let text = std::fs::read_to_string(&labels_path)
                    .with_context(|| format!("reading {}", labels_path.display()))?;
                let labels: Vec<u8> = serde_json::from_str(&text).map_err(Error::from)?;
                Ok(TrainingInstance::new(bundle, labels)?)
            })
            .collect::<Result<Vec<_>>>()?
    } else {
        let provider = SyntheticProvider::new(file.synthetic.clone(), file.train.seed)?;
        read_dataset(path)?
            .iter()
            .map(|s| -> Result<TrainingInstance> {
                let labels = s
                    .relevance_labels
                    .clone()
                    .ok_or_else(|| Error::Invalid("training samples need relevance labels".into()))?;
                Ok(TrainingInstance::new(provider.hidden(s, Granularity::DocumentLevel)?, labels)?)
            })
            .collect::<Result<Vec<_>>>()?
    };
    if data.is_empty() {
        return Err(Error::NoSamples.into());
    }
    Ok(data)
}

/// Every distinct document in `samples`, first occurrence wins.
fn document_pool(samples: &[QuerySample]) -> Vec<Document> {
    let mut seen = HashSet::new();
    samples
        .iter()
        .flat_map(|s| &s.documents)
        .filter(|d| seen.insert(d.id.clone()))
        .cloned()
        .collect()
}

fn write_file(path: &Path, body: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    std::fs::write(path, body).with_context(|| format!("writing {}", path.display()))
}

fn summarize(rows: &[(String, String)]) {
    let mut out = std::io::stdout().lock();
    for (k, v) in rows {
        let _ = writeln!(out, "{k}: {v}");
    }
}
