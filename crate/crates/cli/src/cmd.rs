use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use anyhow::{anyhow, bail, Context};
use dxgate_client::GatewayClient;
use dxgate_core::ann::{AnnIndex, AnnParams};
use dxgate_core::api::{Task, TaskRequest};
use dxgate_core::embedding::{EmbeddingModel, TokenId};
use dxgate_core::mechanism::{Mechanism, NnBackend, SanitizationConfig, SanitizedText};
use dxgate_core::quality::{FeatureExtractor, TargetKind, TextEmbeddingProvider};
use dxgate_core::regressor::{self, Dataset, EvalReport, FeatureRecord, FeatureSet, GbdtModel, Hyperparams};
use dxgate_core::replication::{self, SweepCurve};
use dxgate_core::rng;
use dxgate_core::text::{tokenize_words, TokenizerOptions};
use dxgate_gateway::chat::{ChatBackend, HttpChatClient};
use dxgate_gateway::config::{ChatEndpointConfig, ProviderConfig, TaskTemplates};
use dxgate_gateway::{Gateway, GatewayConfig};
use rand::RngCore;
use serde::{Deserialize, Serialize};
use tracing::{info, warn};

use crate::*;

pub enum CliError {
    Usage(String),
    Runtime(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for CliError {
    fn from(e: E) -> Self {
        CliError::Runtime(e.into())
    }
}

type Result<T> = std::result::Result<T, CliError>;

pub fn init_logging(level: &str) {
    let filter =
        tracing_subscriber::EnvFilter::try_new(level).unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info"));
    let _ = tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(io::stderr)
        .with_target(false)
        .with_ansi(io::IsTerminal::is_terminal(&io::stderr()))
        .try_init();
}

fn in_ci() -> bool {
    std::env::var("CI").is_ok_and(|v| !v.is_empty() && v != "0" && !v.eq_ignore_ascii_case("false"))
}

/// The root seed for a randomized command.
fn root_seed(given: Option<u64>) -> Result<u64> {
    match given {
        Some(s) => Ok(s),
        None if in_ci() => Err(CliError::Usage("--seed is required when CI is set".into())),
        None => {
            let s = rand::rng().next_u64();
            info!(seed = s, "no --seed given, drew one");
            Ok(s)
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let seed = cli.seed;
    match cli.command {
        Command::Convert(a) => convert(a),
        Command::Nn(a) => nn(a),
        Command::Sanitize(a) => sanitize(a, root_seed(seed)?),
        Command::Replicate(ReplicateCommand::Words(a)) => replicate_words(a, root_seed(seed)?),
        Command::Replicate(ReplicateCommand::Curve(a)) => replicate_curve(a, root_seed(seed)?),
        Command::Sweep(a) => {
            let s = root_seed(seed)?;
            runtime()?.block_on(sweep(a, s))
        }
        Command::Features(a) => {
            let s = root_seed(seed)?;
            runtime()?.block_on(features(a, s))
        }
        Command::Train(a) => train(a, root_seed(seed)?),
        Command::Evaluate(a) => evaluate(a),
        Command::Serve(a) => runtime()?.block_on(serve(a, seed)),
        Command::Assess(a) => runtime()?.block_on(remote(a, false)),
        Command::Complete(a) => runtime()?.block_on(remote(a, true)),
    }
}

fn runtime() -> Result<tokio::runtime::Runtime> {
    Ok(tokio::runtime::Builder::new_multi_thread().enable_all().build()?)
}

fn output(out: &str) -> Result<Box<dyn Write>> {
    if out == "-" {
        Ok(Box::new(BufWriter::new(io::stdout().lock())))
    } else {
        let f = File::create(out).with_context(|| format!("create {out}"))?;
        Ok(Box::new(BufWriter::new(f)))
    }
}

fn write_json<T: Serialize>(out: &str, value: &T) -> Result<()> {
    let mut w = output(out)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn read_input(input: Option<&str>) -> Result<String> {
    let mut s = String::new();
    match input {
        None | Some("-") => {
            io::stdin().read_to_string(&mut s)?;
        }
        Some(p) => {
            File::open(p)
                .with_context(|| format!("open {p}"))?
                .read_to_string(&mut s)?;
        }
    }
    Ok(s)
}

fn load_model(path: &Path) -> Result<EmbeddingModel> {
    let m = EmbeddingModel::load_any(path).with_context(|| format!("load {}", path.display()))?;
    info!(
        model = m.name(),
        vocab = m.len(),
        dim = m.dim(),
        "embedding model loaded"
    );
    Ok(m)
}

fn ann_params(a: &AnnArgs) -> AnnParams {
    AnnParams {
        tree_count: a.trees,
        leaf_size: a.leaf_size,
        search_budget: a.search_budget,
        build_seed: a.build_seed,
    }
}

fn build_index(model: &EmbeddingModel, a: &AnnArgs, needed: bool) -> Result<Option<AnnIndex>> {
    if !needed {
        return Ok(None);
    }
    let params = ann_params(a);
    params.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let idx = AnnIndex::build(model, params)?;
    info!(trees = params.tree_count, nodes = idx.node_count(), "ann index built");
    Ok(Some(idx))
}

fn mechanism<'a>(model: &'a EmbeddingModel, idx: &'a Option<AnnIndex>) -> Mechanism<'a> {
    match idx {
        Some(i) => Mechanism::with_index(model, i),
        None => Mechanism::new(model),
    }
}

fn convert(a: ConvertArgs) -> Result<()> {
    let name = a.name.unwrap_or_else(|| {
        a.input
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "glove".into())
    });
    let f = File::open(&a.input).with_context(|| format!("open {}", a.input.display()))?;
    let model = EmbeddingModel::read_glove_text(BufReader::new(f), name)?;
    model.save_binary(&a.out)?;
    info!(vocab = model.len(), dim = model.dim(), out = %a.out.display(), "converted");
    Ok(())
}

#[derive(Serialize)]
struct NnRow {
    rank: usize,
    token: String,
    id: TokenId,
    distance: f64,
}

#[derive(Serialize)]
struct NnOutput {
    token: String,
    backend: NnBackend,
    neighbors: Vec<NnRow>,
}

fn nn(a: NnArgs) -> Result<()> {
    if a.k == 0 {
        return Err(CliError::Usage("-k must be at least 1".into()));
    }
    let model = load_model(&a.model)?;
    let id = model
        .lookup(&a.token)
        .ok_or_else(|| anyhow!("{:?} is not in the vocabulary", a.token))?;
    let query: Vec<f64> = model.embed(id).iter().map(|&v| f64::from(v)).collect();
    let backend = NnBackend::from(a.backend);
    let list = match build_index(&model, &a.ann, backend == NnBackend::Approximate)? {
        Some(idx) => idx.nearest(&model, &query, a.k)?,
        None => model.exact_nearest(&query, a.k)?,
    };
    let neighbors = list
        .entries
        .iter()
        .enumerate()
        .map(|(rank, n)| NnRow {
            rank,
            token: model.token(n.id).unwrap_or_default().to_string(),
            id: n.id,
            distance: n.distance,
        })
        .collect();
    write_json(
        &a.out,
        &NnOutput {
            token: a.token,
            backend,
            neighbors,
        },
    )
}

#[derive(Serialize)]
struct SanitizeOutput {
    epsilon: f64,
    variant: dxgate_core::Variant,
    backend: NnBackend,
    seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    sanitized_text: Option<String>,
    changed_pct: f64,
    #[serde(flatten)]
    detail: SanitizedText,
}

fn sanitize(a: SanitizeArgs, seed: u64) -> Result<()> {
    let model = load_model(&a.model)?;
    let backend = NnBackend::from(a.backend);
    let idx = build_index(&model, &a.ann, backend == NnBackend::Approximate)?;
    let mech = mechanism(&model, &idx);
    let mut cfg = SanitizationConfig::new(a.epsilon, a.variant.into(), backend, seed);
    cfg.oov_policy = a.oov.into();
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let input = read_input(a.input.as_deref())?;
    let (detail, text) = if a.token_ids {
        let ids = input
            .split_whitespace()
            .map(|t| t.parse::<u32>().map(TokenId))
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| anyhow!("token ids must be unsigned integers: {e}"))?;
        (mech.sanitize_ids(&ids, &cfg)?, None)
    } else {
        let tok = tokenize_words(
            &input,
            TokenizerOptions {
                lowercase: !a.keep_case,
            },
        );
        let (s, t) = mech.sanitize_tokenized(&tok, &cfg)?;
        (s, Some(t))
    };
    write_json(
        &a.out,
        &SanitizeOutput {
            epsilon: a.epsilon,
            variant: cfg.variant,
            backend,
            seed,
            sanitized_text: text,
            changed_pct: detail.changed_pct(),
            detail,
        },
    )
}

fn replicate_words(a: ReplicateWordsArgs, seed: u64) -> Result<()> {
    let model = load_model(&a.model)?;
    let backend = NnBackend::from(a.backend);
    let idx = build_index(&model, &a.ann, backend == NnBackend::Approximate)?;
    let mech = mechanism(&model, &idx);
    let mut reports = Vec::new();
    for w in &a.words {
        for &eps in &a.epsilons {
            let r = replication::word_frequency_experiment(&mech, w, eps, a.trials, backend, a.variant.into(), seed)?;
            info!(word = %w, epsilon = eps, self_return = r.self_return_count, "word done");
            reports.push(r);
        }
    }
    match a.format {
        FormatArg::Json => write_json(&a.out, &reports),
        FormatArg::Csv => {
            let mut w = output(&a.out)?;
            replication::write_reports_csv(&mut w, &reports)?;
            w.flush()?;
            Ok(())
        }
    }
}

fn write_curves(out: &str, format: FormatArg, curves: &[SweepCurve]) -> Result<()> {
    match format {
        FormatArg::Json => write_json(out, &curves),
        FormatArg::Csv => {
            let mut w = output(out)?;
            replication::write_curves_csv(&mut w, curves)?;
            w.flush()?;
            Ok(())
        }
    }
}

fn replicate_curve(a: ReplicateCurveArgs, seed: u64) -> Result<()> {
    let model = load_model(&a.model)?;
    let need_ann = a.backend.contains(&BackendArg::Ann);
    let idx = build_index(&model, &a.ann, need_ann)?;
    let mech = mechanism(&model, &idx);
    let words = replication::sample_words(&model, a.sample_size, seed);
    if words.len() < a.sample_size {
        warn!(
            requested = a.sample_size,
            got = words.len(),
            "vocabulary smaller than the sample"
        );
    }
    let mut curves = Vec::new();
    for b in &a.backend {
        let c = replication::self_return_curve(
            &mech,
            &words,
            &a.epsilons,
            a.trials,
            (*b).into(),
            a.variant.into(),
            seed,
        )?;
        info!(backend = NnBackend::from(*b).as_str(), values = ?c.values, "curve done");
        curves.push(c);
    }
    write_curves(&a.out, a.format, &curves)
}

fn provider(p: &ProviderArgs) -> Result<Arc<dyn TextEmbeddingProvider>> {
    let cfg = match p.provider {
        ProviderKind::Mock => ProviderConfig::Mock {
            dim: p.mock_dim,
            seed: p.mock_seed,
            semantic: true,
        },
        ProviderKind::Http => ProviderConfig::Http {
            url: p
                .provider_url
                .clone()
                .ok_or_else(|| CliError::Usage("--provider http needs --provider-url".into()))?,
            model: p.provider_model.clone(),
            api_key_env: p.provider_key_env.clone(),
            max_in_flight: 4,
            timeout_secs: 120,
        },
        ProviderKind::File => ProviderConfig::File {
            path: p
                .provider_file
                .clone()
                .ok_or_else(|| CliError::Usage("--provider file needs --provider-file".into()))?,
        },
    };
    Ok(dxgate_gateway::provider::build_provider(&cfg)?)
}

#[derive(Serialize)]
struct SweepOutput {
    documents: usize,
    filtered_count: usize,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    warnings: Vec<String>,
    #[serde(flatten)]
    sweep: replication::CorpusSweep,
}

async fn sweep(a: SweepArgs, seed: u64) -> Result<()> {
    let model = load_model(&a.model)?;
    let backend = NnBackend::from(a.backend);
    let idx = build_index(&model, &a.ann, backend == NnBackend::Approximate)?;
    let mech = mechanism(&model, &idx);
    let corpus = replication::load_corpus(&a.corpus, a.max_tokens, a.sample_size, seed)?;
    let extractor = FeatureExtractor::new(provider(&a.provider)?);
    let sweep = replication::corpus_sweep(
        &mech,
        &corpus.documents,
        &a.epsilons,
        backend,
        a.variant.into(),
        &extractor,
        seed,
    )
    .await?;
    let failure = sweep.error.clone();
    match a.format {
        FormatArg::Json => write_json(
            &a.out,
            &SweepOutput {
                documents: corpus.documents.len(),
                filtered_count: corpus.filtered_count,
                warnings: corpus.warnings,
                sweep,
            },
        )?,
        FormatArg::Csv => write_curves(&a.out, a.format, &[sweep.similarity, sweep.unchanged])?,
    }
    match failure {
        Some(e) => Err(anyhow!("sweep stopped early, partial results written: {e}").into()),
        None => Ok(()),
    }
}

/// One input line of `features`.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct PromptRecord {
    id: String,
    prompt: String,
    #[serde(default)]
    epsilon: Option<f64>,
    #[serde(default)]
    sanitized_prompt: Option<String>,
    #[serde(default)]
    slm_result: Option<String>,
    #[serde(default)]
    slm_result_sanitized: Option<String>,
    #[serde(default)]
    llm_result_sanitized: Option<String>,
}

struct Slm {
    client: HttpChatClient,
    templates: TaskTemplates,
}

impl Slm {
    async fn summarize(&self, text: &str) -> anyhow::Result<String> {
        let t = dxgate_gateway::tasks::render(&Task::Summarize, text, &self.templates);
        Ok(self.client.complete(&t.message, t.max_tokens).await?)
    }
}

async fn features(a: FeaturesArgs, seed: u64) -> Result<()> {
    let model = a.model.as_deref().map(load_model).transpose()?;
    let backend = NnBackend::from(a.backend);
    let idx = match &model {
        Some(m) => build_index(m, &a.ann, backend == NnBackend::Approximate)?,
        None => None,
    };
    let slm = match &a.slm_url {
        Some(url) => {
            let cfg = ChatEndpointConfig {
                base_url: url.clone(),
                model: a.slm_model.clone(),
                api_key_env: None,
                timeout_secs: 120,
                templates: TaskTemplates::default(),
            };
            Some(Slm {
                client: HttpChatClient::new(&cfg)?,
                templates: cfg.templates,
            })
        }
        None => None,
    };
    let extractor = FeatureExtractor::new(provider(&a.provider)?);
    let reader = BufReader::new(File::open(&a.input).with_context(|| format!("open {}", a.input.display()))?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: PromptRecord = serde_json::from_str(&line).with_context(|| format!("line {}", i + 1))?;
        let eps = rec
            .epsilon
            .or(a.epsilon)
            .ok_or_else(|| CliError::Usage(format!("record {} has no epsilon and --epsilon is missing", rec.id)))?;
        let sanitized = match rec.sanitized_prompt {
            Some(s) => s,
            None => {
                let m = model
                    .as_ref()
                    .ok_or_else(|| CliError::Usage(format!("record {} needs --model to be sanitized", rec.id)))?;
                let rec_seed = rng::keyed(seed, "features-record", &[rng::str_key(&rec.id)]).next_u64();
                let mut cfg = SanitizationConfig::new(eps, a.variant.into(), backend, rec_seed);
                cfg.oov_policy = dxgate_core::OovPolicy::PassthroughFlagged;
                let tok = tokenize_words(&rec.prompt, TokenizerOptions::default());
                mechanism(m, &idx).sanitize_tokenized(&tok, &cfg)?.1
            }
        };
        let slm_for = |have: Option<String>, text: String| {
            let slm = &slm;
            let id = rec.id.clone();
            async move {
                match (have, slm) {
                    (Some(r), _) => Ok(r),
                    (None, Some(s)) => s.summarize(&text).await,
                    (None, None) => bail!("record {id} lacks SLM results and --slm-url is missing"),
                }
            }
        };
        let r_slm = slm_for(rec.slm_result, rec.prompt.clone()).await?;
        let r_slm_eps = slm_for(rec.slm_result_sanitized, sanitized.clone()).await?;
        let mut fv = extractor
            .compute_features(&rec.prompt, &sanitized, &r_slm, &r_slm_eps, eps)
            .await
            .with_context(|| format!("record {}", rec.id))?;
        if let Some(r) = rec.llm_result_sanitized.as_deref() {
            let e = extractor
                .realized_target(&rec.prompt, r)
                .await
                .with_context(|| format!("record {}", rec.id))?;
            fv = fv.with_target(e, TargetKind::Realized);
        }
        out.push(FeatureRecord::from_vector(rec.id, &fv));
    }
    info!(
        rows = out.len(),
        provider_calls = extractor.provider_calls(),
        "features computed"
    );
    let mut w = output(&a.out)?;
    regressor::write_feature_csv(&mut w, &out)?;
    w.flush()?;
    Ok(())
}

/// Written by `train --report`; readable as an `evaluate --baseline`.
#[derive(Debug, Serialize, Deserialize)]
struct TrainReport {
    feature_set: FeatureSet,
    seed: u64,
    rows: usize,
    train_rows: usize,
    test_rows: usize,
    hyperparams: Hyperparams,
    final_train_rmse: Option<f64>,
    report: EvalReport,
}

fn train(a: TrainArgs, seed: u64) -> Result<()> {
    let params = Hyperparams {
        max_bins: a.max_bins,
        iterations: a.iterations,
        learning_rate: a.learning_rate,
        max_depth: a.max_depth,
        min_samples_leaf: a.min_samples_leaf,
        l2_regularization: 0.0,
        test_fraction: a.test_fraction,
    };
    let records = regressor::load_feature_csv(&a.features)?;
    let ds = Dataset::from_records(&records, a.feature_set)?;
    let outcome = regressor::train(&ds, &params, seed)?;
    outcome.model.save(&a.out)?;
    for w in &outcome.report.warnings {
        warn!("{w}");
    }
    info!(
        rows = ds.len(),
        r2 = ?outcome.report.r2,
        rmse = outcome.report.rmse,
        out = %a.out.display(),
        "regressor trained"
    );
    if let Some(path) = &a.report {
        write_json(
            path,
            &TrainReport {
                feature_set: a.feature_set,
                seed,
                rows: ds.len(),
                train_rows: outcome.train_rows,
                test_rows: outcome.test_rows,
                hyperparams: params,
                final_train_rmse: outcome.train_rmse.last().copied(),
                report: outcome.report,
            },
        )?;
    }
    Ok(())
}

#[derive(Serialize)]
struct Delta {
    r2: Option<f64>,
    rmse: f64,
    wasted_pct: f64,
    failed_pct: f64,
}

#[derive(Serialize)]
struct EvaluateOutput {
    feature_set: FeatureSet,
    report: EvalReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    baseline: Option<EvalReport>,
    /// This model minus the baseline.
    #[serde(skip_serializing_if = "Option::is_none")]
    delta: Option<Delta>,
}

fn read_baseline(src: &str) -> Result<EvalReport> {
    let v: serde_json::Value = serde_json::from_str(&read_input(Some(src))?).context("baseline is not JSON")?;
    let inner = v.get("report").cloned().unwrap_or(v);
    Ok(serde_json::from_value(inner).context("baseline holds no evaluation report")?)
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    let model = GbdtModel::load(&a.model)?;
    let records = regressor::load_feature_csv(&a.features)?;
    let ds = Dataset::from_records(&records, model.feature_set())?;
    let preds = model.predict_dataset(&ds)?;
    let report = regressor::evaluate(&preds, &ds.targets)?;
    let baseline = a.baseline.as_deref().map(read_baseline).transpose()?;
    let delta = baseline.as_ref().map(|b| Delta {
        r2: report.r2.zip(b.r2).map(|(x, y)| x - y),
        rmse: report.rmse - b.rmse,
        wasted_pct: report.wasted_pct - b.wasted_pct,
        failed_pct: report.failed_pct - b.failed_pct,
    });
    write_json(
        &a.out,
        &EvaluateOutput {
            feature_set: model.feature_set(),
            report,
            baseline,
            delta,
        },
    )
}

async fn serve(a: ServeArgs, seed: Option<u64>) -> Result<()> {
    let mut cfg = GatewayConfig::load(&a.config)?;
    if let Some(l) = a.listen {
        cfg.listen = l;
    }
    if seed.is_some() {
        cfg.sanitization.seed = seed;
    }
    if cfg.sanitization.seed.is_none() && in_ci() {
        return Err(CliError::Usage(
            "--seed (or sanitization.seed) is required when CI is set".into(),
        ));
    }
    let listen = cfg.listen.clone();
    let gw = tokio::task::spawn_blocking(move || Gateway::from_config(&cfg)).await??;
    dxgate_gateway::http::serve(Arc::new(gw), &listen).await?;
    Ok(())
}

async fn remote(a: RemoteArgs, complete: bool) -> Result<()> {
    let prompt = match a.prompt {
        Some(p) => p,
        None => read_input(a.input.as_deref())?,
    };
    let task = match a.task {
        TaskArg::Summarize => Task::Summarize,
        TaskArg::Translate => Task::Translate {
            target_language: a
                .target_language
                .ok_or_else(|| CliError::Usage("--task translate needs --target-language".into()))?,
        },
        TaskArg::Custom => Task::Custom {
            template: a
                .template
                .ok_or_else(|| CliError::Usage("--task custom needs --template".into()))?,
        },
    };
    let mut req = TaskRequest::new(prompt, task, a.epsilon);
    req.quality_threshold = a.threshold;
    req.correct_prompts = a.correct_prompts;
    req.validate().map_err(CliError::Usage)?;
    let client = GatewayClient::new(&a.url)?;
    if complete {
        match client.complete(&req).await {
            Ok(d) => write_json(&a.out, &d),
            Err(e) => {
                if let Some(fb) = e.fallback() {
                    write_json(&a.out, fb)?;
                }
                Err(e.into())
            }
        }
    } else {
        write_json(&a.out, &client.assess(&req).await?)
    }
}
