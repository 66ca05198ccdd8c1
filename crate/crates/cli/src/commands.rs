use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use lsra_core::compress::{self, SizeReport, SPARSITY_GRID};
use lsra_core::cost::{self, CostReport, GateResult, MOBILE_SEQ_LEN};
use lsra_core::model::{diagonal_mass, AttnKind, Model, ModelTask};
use lsra_core::train::{self, Batch, EvalMetrics, TrainConfig, TrainSummary, Trainer};
use lsra_core::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::manifest::{OutDir, RunManifest};

pub const CHECKPOINT_FILE: &str = "checkpoint.ltc";
pub const COMPRESSED_FILE: &str = "compressed.ltq";
pub const PROFILE_FILE: &str = "profile.json";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const TRAIN_SUMMARY_FILE: &str = "train_summary.json";
pub const EVAL_FILE: &str = "eval.json";
pub const DECODE_FILE: &str = "decode.txt";
pub const ATTENTION_FILE: &str = "attention.json";
pub const COMPRESS_REPORT_FILE: &str = "compress_report.json";
pub const SENSITIVITY_FILE: &str = "sensitivity.json";
pub const COMPARE_FILE: &str = "compare.json";
pub const COMPARE_TABLE_FILE: &str = "compare.txt";

/// Per-device sustained throughput and sentence rate behind the derived
/// Mult-Adds budget.
pub const DEVICE_FLOPS: f64 = 48e9;
pub const SENTENCES_PER_SECOND: f64 = 50.0;

/// What a command reports back to the caller besides its files.
pub struct Outcome {
    pub manifest: RunManifest,
    /// Human-readable summary for stdout.
    pub summary: String,
}

fn load_model(path: &Path, run: &RunConfig) -> Result<Model> {
    if !path.exists() {
        return Err(CliError::Config(format!("checkpoint {} does not exist", path.display())));
    }
    let model = checkpoint::load_checkpoint(path)?;
    if model.config() != &run.model {
        return Err(CliError::Config(format!(
            "checkpoint {} was trained with a different [model] table",
            path.display()
        )));
    }
    Ok(model)
}

fn eval_batches(train: &TrainConfig) -> Result<Vec<Batch>> {
    Ok(vec![Batch::from_examples(train.eval_examples()?)])
}

pub fn eval_metrics(model: &Model, train: &TrainConfig) -> Result<EvalMetrics> {
    Ok(train::evaluate(model, &eval_batches(train)?, train.label_smoothing)?)
}

#[derive(Serialize)]
struct ProfileFile<'a> {
    report: &'a CostReport,
    gate: Option<&'a GateResult>,
    /// Mult-Adds per sentence affordable at the reference device rate.
    derived_budget: u64,
}

pub struct ProfileArgs {
    pub config: PathBuf,
    pub n_src: usize,
    pub n_tgt: usize,
    pub gate: bool,
    pub out_dir: PathBuf,
}

fn category_name(c: cost::Category) -> &'static str {
    match c {
        cost::Category::Attention => "attention",
        cost::Category::Ffn => "ffn",
        cost::Category::Conv => "conv",
        cost::Category::Other => "other",
    }
}

fn format_report(r: &CostReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:<32} {:>10} {:>14} {:>12}", "component", "category", "mult-adds", "params");
    for e in &r.entries {
        let _ = writeln!(s, "{:<32} {:>10} {:>14} {:>12}", e.component, category_name(e.category), e.mult_adds, e.params);
    }
    let _ = writeln!(
        s,
        "total mult-adds {} (asymptotic {}), params {} (+{} embedding)",
        r.total_mult_adds, r.asymptotic_mult_adds, r.total_params, r.embedding_params
    );
    let _ = writeln!(
        s,
        "shares: attention {:.3} ffn {:.3} conv {:.3} other {:.3}",
        r.shares.attention, r.shares.ffn, r.shares.conv, r.shares.other
    );
    s
}

pub fn cmd_profile(a: &ProfileArgs) -> Result<Outcome> {
    let run = RunConfig::load(&a.config)?;
    if a.n_tgt == 0 || a.n_src == 0 {
        return Err(CliError::Config("--n-src and --n-tgt must be at least 1".into()));
    }
    let n_src = if run.model.task == ModelTask::Lm { 0 } else { a.n_src };
    if a.gate && (a.n_tgt != MOBILE_SEQ_LEN || (n_src != 0 && n_src != MOBILE_SEQ_LEN)) {
        return Err(CliError::Config(format!("--gate is defined at {MOBILE_SEQ_LEN} tokens")));
    }
    let report = cost::profile(&run.model, n_src.max(1), a.n_tgt)?;
    let gate = if a.gate { Some(cost::mobile_gate(&report)?) } else { None };
    let mut out = OutDir::create(&a.out_dir)?;
    out.write_json(
        PROFILE_FILE,
        &ProfileFile {
            report: &report,
            gate: gate.as_ref(),
            derived_budget: cost::mult_adds_budget(DEVICE_FLOPS, SENTENCES_PER_SECOND),
        },
    )?;
    let manifest = out.finish("profile", Some(&a.config), run.seed())?;
    let mut summary = format_report(&report);
    if let Some(g) = &gate {
        if !g.pass {
            return Err(CliError::Gate(g.reasons.join("; ")));
        }
        summary.push_str("mobile gate: pass\n");
    }
    Ok(Outcome { manifest, summary })
}

#[derive(Serialize)]
struct MetricsRecord {
    step: usize,
    loss: f64,
    lr: f64,
    grad_norm: f64,
    tokens: usize,
    tokens_per_s: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    eval_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    eval_accuracy: Option<f64>,
}

pub struct TrainArgs {
    pub config: PathBuf,
    pub out_dir: PathBuf,
}

pub fn cmd_train(a: &TrainArgs) -> Result<Outcome> {
    let run = RunConfig::load(&a.config)?;
    let tc = run.train()?.clone();
    let model = Model::build(&run.model, &mut Rng::new(tc.seed))?;
    let mut trainer = Trainer::new(model, tc.clone()).map_err(|e| match e {
        lsra_core::Error::Config { .. } => CliError::Config(format!("[train] {e}")),
        other => other.into(),
    })?;
    let mut out = OutDir::create(&a.out_dir)?;
    let metrics_path = out.path(METRICS_FILE);
    let file = File::create(&metrics_path).map_err(|e| CliError::io(&metrics_path, e))?;
    let mut metrics = BufWriter::new(file);
    let mut io_err = None;
    let mut last = Instant::now();
    let summary: TrainSummary = trainer.run(|m, e| {
        let dt = last.elapsed().as_secs_f64();
        last = Instant::now();
        let rec = MetricsRecord {
            step: m.step,
            loss: m.loss,
            lr: m.lr,
            grad_norm: m.grad_norm,
            tokens: m.tokens,
            tokens_per_s: if dt > 0.0 { m.tokens as f64 / dt } else { 0.0 },
            eval_loss: e.map(|e| e.loss),
            eval_accuracy: e.map(|e| e.accuracy),
        };
        let line = serde_json::to_string(&rec).expect("metrics serialize");
        if let Err(err) = writeln!(metrics, "{line}") {
            io_err.get_or_insert(err);
        }
    })?;
    if let Some(e) = io_err {
        return Err(CliError::io(&metrics_path, e));
    }
    metrics.flush().map_err(|e| CliError::io(&metrics_path, e))?;
    drop(metrics);
    out.record(METRICS_FILE);
    checkpoint::save_checkpoint(&out.path(CHECKPOINT_FILE), trainer.model())?;
    out.record(CHECKPOINT_FILE);
    out.write_json(TRAIN_SUMMARY_FILE, &summary)?;
    let text = format!(
        "trained {} updates{}: eval loss {:.4}, accuracy {:.4}\n",
        summary.steps,
        if summary.stopped_early { " (target reached)" } else { "" },
        summary.final_eval.loss,
        summary.final_eval.accuracy
    );
    let manifest = out.finish("train", Some(&a.config), tc.seed)?;
    Ok(Outcome { manifest, summary: text })
}

pub struct EvalArgs {
    pub config: PathBuf,
    pub checkpoint: PathBuf,
    pub out_dir: PathBuf,
}

#[derive(Serialize, Deserialize)]
pub struct EvalFile {
    pub loss: f64,
    pub accuracy: f64,
    pub tokens: usize,
    /// Language models only: `exp` of the unsmoothed per-token
    /// cross-entropy, each held-out sequence scored from its begin token.
    pub perplexity: Option<f64>,
}

pub fn cmd_eval(a: &EvalArgs) -> Result<Outcome> {
    let run = RunConfig::load(&a.config)?;
    let tc = run.train()?;
    let model = load_model(&a.checkpoint, &run)?;
    let m = eval_metrics(&model, tc)?;
    let perplexity = if run.model.task == ModelTask::Lm {
        Some(train::evaluate(&model, &eval_batches(tc)?, 0.0)?.loss.exp())
    } else {
        None
    };
    let mut out = OutDir::create(&a.out_dir)?;
    out.write_json(
        EVAL_FILE,
        &EvalFile {
            loss: m.loss,
            accuracy: m.accuracy,
            tokens: m.tokens,
            perplexity,
        },
    )?;
    let mut summary = format!("eval loss {:.4}, accuracy {:.4} over {} tokens\n", m.loss, m.accuracy, m.tokens);
    if let Some(p) = perplexity {
        let _ = writeln!(summary, "perplexity {p:.4}");
    }
    let manifest = out.finish("eval", Some(&a.config), tc.seed)?;
    Ok(Outcome { manifest, summary })
}

pub struct DecodeArgs {
    pub config: PathBuf,
    pub checkpoint: PathBuf,
    /// `None` decodes greedily.
    pub beam: Option<usize>,
    pub lenpen: f64,
    pub count: Option<usize>,
    pub max_len: Option<usize>,
    pub out_dir: PathBuf,
}

fn ids(tokens: &[usize]) -> String {
    tokens.iter().map(usize::to_string).collect::<Vec<_>>().join(" ")
}

/// One line per held-out example: `source<TAB>hypothesis<TAB>finished`,
/// token ids space-separated, the begin token omitted.
pub fn cmd_decode(a: &DecodeArgs) -> Result<Outcome> {
    let run = RunConfig::load(&a.config)?;
    let tc = run.train()?;
    let model = load_model(&a.checkpoint, &run)?;
    if a.beam == Some(0) {
        return Err(CliError::Config("--beam must be at least 1".into()));
    }
    let examples = tc.eval_examples()?;
    let count = a.count.unwrap_or(examples.len()).min(examples.len());
    let max_len = a.max_len.unwrap_or(2 * tc.max_len + 2);
    let mut text = String::new();
    let mut exact = 0;
    for e in &examples[..count] {
        let hyp = match a.beam {
            None => model.greedy(&e.src, max_len)?,
            Some(b) => model.beam_search(&e.src, b, a.lenpen, max_len)?,
        };
        exact += usize::from(hyp.tokens == e.tgt[1..]);
        let src: &[usize] = if e.src.is_empty() { &[] } else { &e.src[1..] };
        let _ = writeln!(text, "{}\t{}\t{}", ids(src), ids(&hyp.tokens), hyp.finished);
    }
    let mut out = OutDir::create(&a.out_dir)?;
    out.write(DECODE_FILE, text.as_bytes())?;
    let manifest = out.finish("decode", Some(&a.config), tc.seed)?;
    let summary = format!("decoded {count} sequences, {exact} exact matches\n");
    Ok(Outcome { manifest, summary })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapExport {
    pub kind: AttnKind,
    pub tokens_q: Vec<String>,
    pub tokens_kv: Vec<String>,
    /// `[tokens_q.len()][tokens_kv.len()]`, head-averaged.
    pub weights: Vec<Vec<f64>>,
    pub row_sums: Vec<f64>,
    /// `(bandwidth, mass)` for square maps.
    pub diagonal_mass: Vec<(usize, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionExport {
    pub layer: usize,
    pub block_style: lsra_core::lsra::BlockStyle,
    pub src: Vec<usize>,
    pub tgt_in: Vec<usize>,
    pub maps: Vec<MapExport>,
}

pub const DIAGONAL_BANDWIDTHS: [usize; 3] = [0, 1, 2];

pub fn attention_export(model: &Model, src: &[usize], tgt_in: &[usize], layer: usize) -> Result<AttentionExport> {
    let maps = model
        .export_attention(src, tgt_in, layer)?
        .into_iter()
        .map(|m| {
            let weights: Vec<Vec<f64>> = m.weights.chunks(m.cols()).map(<[f64]>::to_vec).collect();
            let row_sums = weights.iter().map(|r| r.iter().sum()).collect();
            let diagonal_mass = if m.rows() == m.cols() {
                DIAGONAL_BANDWIDTHS
                    .iter()
                    .map(|&b| diagonal_mass(&m, b).map(|v| (b, v)))
                    .collect::<lsra_core::Result<Vec<_>>>()?
            } else {
                Vec::new()
            };
            Ok(MapExport {
                kind: m.kind,
                tokens_q: m.tokens_q,
                tokens_kv: m.tokens_kv,
                weights,
                row_sums,
                diagonal_mass,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AttentionExport {
        layer,
        block_style: model.config().block_style,
        src: src.to_vec(),
        tgt_in: tgt_in.to_vec(),
        maps,
    })
}

pub struct AttnExportArgs {
    pub config: PathBuf,
    pub checkpoint: PathBuf,
    pub layer: usize,
    /// Held-out example to visualise.
    pub index: usize,
    pub out_dir: PathBuf,
}

pub fn cmd_attn_export(a: &AttnExportArgs) -> Result<Outcome> {
    let run = RunConfig::load(&a.config)?;
    let tc = run.train()?;
    let model = load_model(&a.checkpoint, &run)?;
    let examples = tc.eval_examples()?;
    let e = examples
        .get(a.index)
        .ok_or_else(|| CliError::Config(format!("--index {} beyond {} held-out examples", a.index, examples.len())))?;
    let export = attention_export(&model, &e.src, e.tgt_in(), a.layer).map_err(|err| match err {
        CliError::Core(lsra_core::Error::Index { .. }) => CliError::Config(format!("--layer {}: {err}", a.layer)),
        other => other,
    })?;
    let mut summary = String::new();
    for m in &export.maps {
        let masses: Vec<String> = m.diagonal_mass.iter().map(|(b, v)| format!("b={b}: {v:.3}")).collect();
        let masses = if masses.is_empty() { "n/a (not square)".to_string() } else { masses.join(", ") };
        let _ = writeln!(summary, "{:?} layer {}: diagonal mass {masses}", m.kind, a.layer);
    }
    let mut out = OutDir::create(&a.out_dir)?;
    out.write_json(ATTENTION_FILE, &export)?;
    let manifest = out.finish("attn-export", Some(&a.config), tc.seed)?;
    Ok(Outcome { manifest, summary })
}

pub struct CompressArgs {
    pub config: PathBuf,
    pub checkpoint: PathBuf,
    pub bits: u32,
    /// JSON object of layer name to sparsity.
    pub sparsity_file: Option<PathBuf>,
    /// Overall sparsity to allocate from a sensitivity scan.
    pub target_sparsity: Option<f64>,
    pub iters: usize,
    pub out_dir: PathBuf,
}

#[derive(Serialize, Deserialize)]
pub struct CompressReport {
    pub bits: u32,
    pub sparsity: BTreeMap<String, f64>,
    pub size: SizeReport,
    pub eval_loss_dense: f64,
    pub eval_loss_compressed: f64,
}

pub fn cmd_compress(a: &CompressArgs) -> Result<Outcome> {
    let run = RunConfig::load(&a.config)?;
    let tc = run.train()?;
    let mut model = load_model(&a.checkpoint, &run)?;
    let mut out = OutDir::create(&a.out_dir)?;
    let batches = eval_batches(tc)?;
    let eval = |m: &Model| -> lsra_core::Result<f64> { Ok(train::evaluate(m, &batches, 0.0)?.loss) };
    let sparsity = match (&a.sparsity_file, a.target_sparsity) {
        (Some(_), Some(_)) => {
            return Err(CliError::Config("give either --sparsity-file or --target-sparsity".into()));
        }
        (Some(path), None) => {
            let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
            serde_json::from_str::<BTreeMap<String, f64>>(&text)
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
        }
        (None, Some(target)) => {
            let profile = compress::sensitivity_scan(&mut model, eval, &SPARSITY_GRID)?;
            out.write_json(SENSITIVITY_FILE, &profile)?;
            compress::allocate_sparsity(&profile, target)?
        }
        (None, None) => BTreeMap::new(),
    };
    let mut rng = Rng::new(tc.seed).fork(5);
    let compressed = compress::compress(&model, &sparsity, a.bits, &mut rng, a.iters).map_err(|e| match e {
        lsra_core::Error::Contract(m) => CliError::Config(m),
        other => other.into(),
    })?;
    checkpoint::save_compressed(&out.path(COMPRESSED_FILE), &compressed)?;
    out.record(COMPRESSED_FILE);
    let size = compress::compressed_size(&compressed);
    let report = CompressReport {
        bits: a.bits,
        sparsity,
        size,
        eval_loss_dense: eval(&model)?,
        eval_loss_compressed: eval(&compressed.to_model()?)?,
    };
    out.write_json(COMPRESS_REPORT_FILE, &report)?;
    let summary = format!(
        "{} -> {} bytes (ratio {:.3}); eval loss {:.4} -> {:.4}\n",
        size.dense_bytes, size.compressed_bytes, size.ratio, report.eval_loss_dense, report.eval_loss_compressed
    );
    let manifest = out.finish("compress", Some(&a.config), tc.seed)?;
    Ok(Outcome { manifest, summary })
}

pub struct CompareArgs {
    pub config_a: PathBuf,
    pub config_b: PathBuf,
    pub checkpoint_a: Option<PathBuf>,
    pub checkpoint_b: Option<PathBuf>,
    pub out_dir: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub name: String,
    pub block_style: lsra_core::lsra::BlockStyle,
    pub d_model: usize,
    pub params: u64,
    pub mult_adds: u64,
    pub gate_pass: bool,
    pub eval_loss: Option<f64>,
}

fn compare_row(config: &Path, ckpt: Option<&Path>) -> Result<CompareRow> {
    let run = RunConfig::load(config)?;
    let report = cost::profile(&run.model, MOBILE_SEQ_LEN, MOBILE_SEQ_LEN)?;
    let gate = cost::mobile_gate(&report)?;
    let eval_loss = match ckpt {
        Some(p) => Some(eval_metrics(&load_model(p, &run)?, run.train()?)?.loss),
        None => None,
    };
    Ok(CompareRow {
        name: config.file_stem().map_or_else(String::new, |s| s.to_string_lossy().into_owned()),
        block_style: run.model.block_style,
        d_model: run.model.d_model,
        params: report.total_params,
        mult_adds: report.total_mult_adds,
        gate_pass: gate.pass,
        eval_loss,
    })
}

fn style_name(style: lsra_core::lsra::BlockStyle) -> String {
    serde_json::to_value(style)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default()
}

pub fn cmd_compare(a: &CompareArgs) -> Result<Outcome> {
    let rows = vec![
        compare_row(&a.config_a, a.checkpoint_a.as_deref())?,
        compare_row(&a.config_b, a.checkpoint_b.as_deref())?,
    ];
    let mut table = String::new();
    let _ = writeln!(
        table,
        "{:<20} {:<16} {:>6} {:>12} {:>16} {:>6} {:>10}",
        "model", "block", "d", "#params", "#mult-adds(30)", "gate", "eval loss"
    );
    for r in &rows {
        let loss = r.eval_loss.map_or_else(|| "-".to_string(), |l| format!("{l:.4}"));
        let _ = writeln!(
            table,
            "{:<20} {:<16} {:>6} {:>12} {:>16} {:>6} {:>10}",
            r.name,
            style_name(r.block_style),
            r.d_model,
            r.params,
            r.mult_adds,
            if r.gate_pass { "pass" } else { "fail" },
            loss
        );
    }
    let mut out = OutDir::create(&a.out_dir)?;
    out.write_json(COMPARE_FILE, &rows)?;
    out.write(COMPARE_TABLE_FILE, table.as_bytes())?;
    let seed = RunConfig::load(&a.config_a)?.seed();
    let manifest = out.finish("compare", Some(&a.config_a), seed)?;
    Ok(Outcome { manifest, summary: table })
}
