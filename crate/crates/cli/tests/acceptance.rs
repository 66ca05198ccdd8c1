//! Acceptance suite: one PASS/FAIL line per criterion. Failures listed in
//! `EXPECTED_FAILURES` are reported but do not fail the run.

#[allow(dead_code)]
#[path = "../../core/tests/support/configs.rs"]
mod configs;
#[allow(dead_code)]
#[path = "../../core/tests/support/gradsweep.rs"]
mod gradsweep;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::Instant;

use lsra_cli::checkpoint;
use lsra_cli::commands::{attention_export, AttentionExport, DEVICE_FLOPS, SENTENCES_PER_SECOND};
use lsra_cli::RunConfig;
use lsra_core::compress::{self, kmeans_1d, layers_size, prunable_layers, prune_weights, quantize_layer};
use lsra_core::cost::{self, block_report, count_forward_madds, profile, Category, MOBILE_MAX_MULT_ADDS};
use lsra_core::layers::ConvMode;
use lsra_core::lsra::{BlockStyle, LayerSpec};
use lsra_core::model::{beam_search_with, AttnKind, Model, ModelTask};
use lsra_core::train::{
    accumulated_gradient, batch_gradient, smoothed_loss, Batch, LrSchedule, ScheduleKind, TaskGen, TaskKind, Trainer,
};
use lsra_core::{Graph, Rng, Session, Tensor};

/// Sub-checks known to fail, with the reason printed next to them.
const EXPECTED_FAILURES: &[(usize, &str, &str)] = &[(
    9,
    "pruned-ratio",
    "the stated storage format (4-byte kept count plus an n/8-byte bitmap) gives 10.64 at 75% pruning; \
     14.2 would need an index below the entropy of an unstructured mask",
)];

struct Failure {
    key: &'static str,
    msg: String,
}

#[derive(Default)]
struct Checks {
    notes: Vec<String>,
    failures: Vec<Failure>,
}

impl Checks {
    fn check(&mut self, key: &'static str, ok: bool, msg: impl Into<String>) {
        let msg = msg.into();
        if ok {
            self.notes.push(msg);
        } else {
            self.failures.push(Failure { key, msg });
        }
    }

    fn note(&mut self, msg: impl Into<String>) {
        self.notes.push(msg.into());
    }
}

type Outcome = Result<Checks, String>;

fn repo_path(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

fn load(rel: &str) -> Result<RunConfig, String> {
    RunConfig::load(&repo_path(rel)).map_err(|e| e.to_string())
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn c1_gradients() -> Outcome {
    let mut c = Checks::default();
    let start = Instant::now();
    let mut all = gradsweep::op_checks(1).map_err(err)?;
    all.extend(gradsweep::block_checks(3).map_err(err)?);
    let secs = start.elapsed().as_secs_f64();
    let (worst_name, worst) = all
        .iter()
        .filter(|(n, _)| !n.contains("zero gradient"))
        .fold(("", 0.0f64), |acc, (n, e)| if *e > acc.1 { (n.as_str(), *e) } else { acc });
    let bad: Vec<&String> = all.iter().filter(|(_, e)| *e > gradsweep::TOLERANCE).map(|(n, _)| n).collect();
    c.check(
        "tolerance",
        bad.is_empty(),
        format!("{} checks, worst relative error {worst:.2e} ({worst_name}); over tolerance: {bad:?}", all.len()),
    );
    c.check("time", secs < 120.0, format!("sweep took {secs:.1}s"));
    Ok(c)
}

fn c2_cost_exactness() -> Outcome {
    let mut c = Checks::default();
    let mut rng = Rng::new(2);
    let (mut enc, mut dec, mut lm) = (0, 0, 0);
    for trial in 0..12 {
        let task = if trial % 2 == 0 { ModelTask::Seq2seq } else { ModelTask::Lm };
        let config = configs::random_config(&mut rng, task);
        let model = Model::build(&config, &mut rng).map_err(err)?;
        let (n_src, n_tgt) = (1 + rng.below(12), 1 + rng.below(12));
        let report = profile(&config, n_src, n_tgt).map_err(err)?;
        let total = count_forward_madds(&model, n_src, n_tgt, &mut rng).map_err(err)?;
        let prefix_sum = |p: &str| report.entries.iter().filter(|e| e.component.starts_with(p)).map(|e| e.mult_adds).sum::<u64>();
        if task == ModelTask::Seq2seq {
            let src: Vec<usize> = (0..n_src).map(|_| 3 + rng.below(config.vocab_src - 3)).collect();
            let mut s = Session::with_graph(model.params(), Graph::with_mac_counter(), false, None);
            model.encode(&mut s, &src, &mut Vec::new()).map_err(err)?;
            let enc_count = s.graph.macs().unwrap_or(0);
            c.check("encoder", enc_count == prefix_sum("encoder."), format!("encoder {enc_count} vs {}", prefix_sum("encoder.")));
            c.check(
                "decoder",
                total - enc_count == prefix_sum("decoder."),
                format!("decoder {} vs {}", total - enc_count, prefix_sum("decoder.")),
            );
            enc += 1;
            dec += 1;
        } else {
            c.check("lm", total == report.total_mult_adds, format!("lm {total} vs {}", report.total_mult_adds));
            lm += 1;
        }
        c.check("total", total == report.total_mult_adds, format!("{:?} total", config.block_style));
    }
    c.check("count", enc >= 5 && dec >= 5 && lm >= 5, format!("{enc} encoder, {dec} decoder, {lm} lm configs"));
    c.notes.retain(|n| n.contains("configs"));
    Ok(c)
}

fn spec(style: BlockStyle, d_ff: usize) -> LayerSpec {
    LayerSpec {
        d_model: 512,
        heads: 8,
        style,
        d_ff,
        kernel_size: 3,
        conv_mode: ConvMode::Dynamic,
        glu: false,
    }
}

fn c3_base_share() -> Outcome {
    let mut c = Checks::default();
    let r = block_report(&spec(BlockStyle::BaseBottleneck, 2048), 30);
    let (attn, ffn) = (r.category_mult_adds(Category::Attention), r.category_mult_adds(Category::Ffn));
    let share = ffn as f64 / (attn + ffn) as f64;
    c.check("counts", (ffn, attn) == (62_914_560, 32_378_880), format!("ffn {ffn}, attention {attn}"));
    c.check("share", (share - 0.660).abs() <= 0.001, format!("ffn share {share:.4}"));
    Ok(c)
}

fn c4_flattened_share() -> Outcome {
    let mut c = Checks::default();
    let r = block_report(&spec(BlockStyle::Flattened, 512), 30);
    c.check(
        "share",
        r.shares.attention > r.shares.ffn,
        format!("attention share {:.4} > ffn share {:.4}", r.shares.attention, r.shares.ffn),
    );
    Ok(c)
}

fn c5_mobile_gate() -> Outcome {
    let mut c = Checks::default();
    let out = tempfile::tempdir().map_err(err)?;
    for (name, want) in [("lite-demo", 0), ("base-big", 2)] {
        let cfg = repo_path(&format!("configs/{name}.toml"));
        let o = Command::new(env!("CARGO_BIN_EXE_lsra"))
            .arg("--out-dir")
            .arg(out.path())
            .args(["profile", cfg.to_str().unwrap(), "--gate"])
            .output()
            .map_err(err)?;
        let code = o.status.code().unwrap_or(-1);
        let report = profile(&load(&format!("configs/{name}.toml"))?.model, 30, 30).map_err(err)?;
        c.check(
            "exit",
            code == want,
            format!("{name}: exit {code} ({} mult-adds, {} params)", report.total_mult_adds, report.total_params),
        );
    }
    let budget = cost::mult_adds_budget(DEVICE_FLOPS, SENTENCES_PER_SECOND);
    c.check("budget", budget == 480_000_000 && budget < MOBILE_MAX_MULT_ADDS, format!("derived budget {budget}"));
    Ok(c)
}

fn c6_causality() -> Outcome {
    let mut c = Checks::default();
    let mut rng = Rng::new(6);
    let (mut trials, mut broken) = (0, 0);
    for m in 0..100 {
        let task = if m % 2 == 0 { ModelTask::Seq2seq } else { ModelTask::Lm };
        let config = configs::random_config(&mut rng, task);
        let model = Model::build(&config, &mut rng).map_err(err)?;
        let v = config.vocab_tgt;
        let content = |rng: &mut Rng, vocab: usize| 3 + rng.below(vocab - 3);
        for _ in 0..10 {
            let n = 2 + rng.below(9);
            let src: Vec<usize> = match task {
                ModelTask::Seq2seq => (0..1 + rng.below(8)).map(|_| content(&mut rng, config.vocab_src)).collect(),
                ModelTask::Lm => Vec::new(),
            };
            let tgt: Vec<usize> = (0..n).map(|_| content(&mut rng, v)).collect();
            let t = rng.below(n - 1);
            let mut changed = tgt.clone();
            for p in t + 1..n {
                if p == t + 1 || rng.below(2) == 0 {
                    changed[p] = (changed[p] + 1 + rng.below(v - 1)) % v;
                }
            }
            let a = model.logits(&src, &tgt).map_err(err)?;
            let b = model.logits(&src, &changed).map_err(err)?;
            trials += 1;
            let prefix = (t + 1) * v;
            if a.data()[..prefix].iter().zip(&b.data()[..prefix]).any(|(x, y)| x.to_bits() != y.to_bits()) {
                broken += 1;
            }
        }
    }
    c.check("trials", trials == 1000 && broken == 0, format!("{trials} trials, {broken} with a changed prefix"));
    Ok(c)
}

struct Trained {
    model: Model,
    steps: usize,
    accuracy: f64,
    secs: f64,
}

fn train(rel: &str, seed: u64) -> Result<Trained, String> {
    let run = load(rel)?;
    let mut tc = run.train().map_err(err)?.clone();
    tc.seed = seed;
    let model = Model::build(&run.model, &mut Rng::new(seed)).map_err(err)?;
    let start = Instant::now();
    let mut trainer = Trainer::new(model, tc).map_err(err)?;
    let summary = trainer.run(|_, _| {}).map_err(err)?;
    Ok(Trained {
        model: trainer.into_model(),
        steps: summary.steps,
        accuracy: summary.final_eval.accuracy,
        secs: start.elapsed().as_secs_f64(),
    })
}

fn c7_learning(keep: &mut Option<Model>) -> Outcome {
    let mut c = Checks::default();
    for (task, limit) in [("copy", 5_000), ("reverse", 10_000)] {
        for seed in 1..=3 {
            let t = train(&format!("configs/{task}.toml"), seed)?;
            c.check(
                "learn",
                t.accuracy >= 0.99 && t.steps <= limit && t.secs < 600.0,
                format!("{task} seed {seed}: accuracy {:.4} after {} updates in {:.0}s", t.accuracy, t.steps, t.secs),
            );
            if task == "copy" && seed == 1 {
                *keep = Some(t.model);
            }
        }
    }
    Ok(c)
}

/// Every sequence of at most `max_len` tokens over `vocab`, scored by
/// summed log-probability; finished ones end in `eos`.
fn exhaustive_best(
    table: &dyn Fn(&[usize]) -> Vec<f64>,
    bos: usize,
    eos: usize,
    vocab: usize,
    lenpen: f64,
    max_len: usize,
) -> Vec<usize> {
    let mut finished: Vec<(Vec<usize>, f64)> = Vec::new();
    let mut partial: Vec<(Vec<usize>, f64)> = Vec::new();
    let mut frontier = vec![(vec![bos], 0.0)];
    for depth in 1..=max_len {
        let mut next = Vec::new();
        for (prefix, score) in &frontier {
            let row = table(prefix);
            for (tok, lp) in row.iter().enumerate().take(vocab) {
                let mut p = prefix.clone();
                p.push(tok);
                if tok == eos {
                    finished.push((p, score + lp));
                } else if depth == max_len {
                    partial.push((p, score + lp));
                } else {
                    next.push((p, score + lp));
                }
            }
        }
        frontier = next;
    }
    let pool = if finished.is_empty() { partial } else { finished };
    let norm = |(p, s): &(Vec<usize>, f64)| s / ((p.len() - 1) as f64).powf(lenpen);
    let mut best = pool[0].clone();
    for h in &pool[1..] {
        let (a, b) = (norm(h), norm(&best));
        if a > b || (a == b && h.0 < best.0) {
            best = h.clone();
        }
    }
    best.0[1..].to_vec()
}

fn c8_decoding() -> Outcome {
    let mut c = Checks::default();
    let mut rng = Rng::new(8);
    let mut same = 0;
    for trial in 0..100 {
        let task = if trial % 4 == 3 { ModelTask::Lm } else { ModelTask::Seq2seq };
        let config = configs::random_config(&mut rng, task);
        let model = Model::build(&config, &mut rng).map_err(err)?;
        let src: Vec<usize> = match task {
            ModelTask::Seq2seq => (0..1 + rng.below(6)).map(|_| 3 + rng.below(config.vocab_src - 3)).collect(),
            ModelTask::Lm => Vec::new(),
        };
        let g = model.greedy(&src, 8).map_err(err)?;
        let b = model.beam_search(&src, 1, 0.6, 8).map_err(err)?;
        same += usize::from(g.tokens == b.tokens && g.score == b.score && g.finished == b.finished);
    }
    c.check("beam1", same == 100, format!("beam 1 equals greedy in {same}/100 trials"));

    // Tokens 0, 1 and end token 2; begin token 3. Step one prefers `0`
    // over ending; after `0`, ending has probability 0.45.
    let table = |prefix: &[usize]| -> Vec<f64> {
        let p: [f64; 3] = match prefix {
            [3] => [0.6, 0.1, 0.3],
            [3, 0] => [0.35, 0.2, 0.45],
            [3, 1] => [0.3, 0.3, 0.4],
            _ => [0.2, 0.3, 0.5],
        };
        p.iter().map(|x| x.ln()).collect()
    };
    for (lenpen, want) in [(0.6, vec![0, 2]), (0.0, vec![2])] {
        let oracle = exhaustive_best(&table, 3, 2, 3, lenpen, 2);
        let got = beam_search_with(|p| Ok(table(p)), 3, 2, 4, lenpen, 2).map_err(err)?.tokens;
        c.check(
            "hand",
            got == oracle && oracle == want,
            format!("hand case lenpen {lenpen}: beam 4 {got:?}, exhaustive {oracle:?}"),
        );
    }
    let mut agree = 0;
    for _ in 0..200 {
        let rows: BTreeMap<Vec<usize>, Vec<f64>> = [vec![3], vec![3, 0], vec![3, 1]]
            .into_iter()
            .map(|k| {
                let raw: Vec<f64> = (0..3).map(|_| rng.uniform_range(0.05, 1.0)).collect();
                let z: f64 = raw.iter().sum();
                (k, raw.iter().map(|x| (x / z).ln()).collect())
            })
            .collect();
        let table = |p: &[usize]| rows[p].clone();
        let oracle = exhaustive_best(&table, 3, 2, 3, 0.6, 2);
        let got = beam_search_with(|p| Ok(table(p)), 3, 2, 9, 0.6, 2).map_err(err)?.tokens;
        agree += usize::from(got == oracle);
    }
    c.check("random", agree == 200, format!("beam 9 matches exhaustive search on {agree}/200 random tables"));
    Ok(c)
}

fn c9_compression() -> Outcome {
    let mut c = Checks::default();
    let n = 1_000_000;
    let mut rng = Rng::new(9);
    let w: Vec<f64> = (0..n).map(|_| rng.normal() * 0.05).collect();
    let q = quantize_layer("w", &[n], &w, None, 8, &mut rng, 20).map_err(err)?;
    let r = layers_size(&[q]);
    c.check("dense-ratio", (r.ratio - 3.99).abs() <= 0.01, format!("8-bit ratio {:.4} ({} bytes)", r.ratio, r.compressed_bytes));

    let mut pruned = w.clone();
    let mask = prune_weights(&mut pruned, 0.75).map_err(err)?;
    let q = quantize_layer("w", &[n], &pruned, Some(&mask), 8, &mut rng, 20).map_err(err)?;
    let r = layers_size(&[q]);
    c.check(
        "pruned-ratio",
        (r.ratio - 14.2).abs() <= 0.1,
        format!("75% pruned 8-bit ratio {:.4} ({} bytes), want 14.2", r.ratio, r.compressed_bytes),
    );

    let kept: Vec<f64> = pruned.iter().zip(&mask).filter(|(_, &k)| k).map(|(x, _)| *x).collect();
    let mut monotone = true;
    let mut iters = 0;
    for values in [&w, &kept] {
        let km = kmeans_1d(values, 256, &mut rng, 30).map_err(err)?;
        iters += km.objective_trace.len();
        monotone &= km.objective_trace.windows(2).all(|p| p[1] <= p[0]);
    }
    c.check("kmeans", monotone, format!("k-means objective non-increasing over {iters} Lloyd iterations"));
    c.note("the 18.2x full-model figure is out of desk-scale scope");
    Ok(c)
}

fn self_enc_mass(e: &AttentionExport) -> Vec<f64> {
    e.maps
        .iter()
        .filter(|m| m.kind == AttnKind::SelfEnc)
        .flat_map(|m| m.diagonal_mass.iter().filter(|(b, _)| *b == 1).map(|(_, v)| *v))
        .collect()
}

fn c10_specialization(lsra: Option<Model>) -> Outcome {
    let mut c = Checks::default();
    let lsra = match lsra {
        Some(m) => m,
        None => train("configs/copy.toml", 1)?.model,
    };
    let base = train("configs/copy-baseline.toml", 1)?;
    let run = load("configs/copy.toml")?;
    let base_cost = profile(base.model.config(), 30, 30).map_err(err)?.total_mult_adds;
    let lsra_cost = profile(lsra.config(), 30, 30).map_err(err)?.total_mult_adds;
    c.note(format!("mult-adds at 30 tokens: lsra {lsra_cost}, baseline {base_cost}"));
    c.note(format!("baseline accuracy {:.4} after {} updates", base.accuracy, base.steps));
    let examples = run.train().map_err(err)?.eval_examples().map_err(err)?;
    let e = examples.iter().max_by_key(|e| e.src.len()).unwrap();
    let mut stochastic = true;
    for (name, model) in [("lsra", &lsra), ("baseline", &base.model)] {
        let mut masses = Vec::new();
        for layer in 0..model.config().n_layers_enc {
            let export = attention_export(model, &e.src, e.tgt_in(), layer).map_err(err)?;
            stochastic &= export.maps.iter().flat_map(|m| &m.row_sums).all(|r| (r - 1.0).abs() < 1e-9);
            masses.extend(self_enc_mass(&export));
        }
        let text: Vec<String> = masses.iter().map(|m| format!("{m:.3}")).collect();
        c.note(format!("{name} encoder self-attention diagonal mass (b=1) per layer: {}", text.join(", ")));
    }
    c.check("stochastic", stochastic, "all exported maps row-stochastic");
    Ok(c)
}

fn c11_training_mechanics() -> Outcome {
    let mut c = Checks::default();
    let model = Model::build(&lsra_core::model::ModelConfig::small_lsra(12, 32, 2, &[3, 5]), &mut Rng::new(11)).map_err(err)?;
    let gen = TaskGen::new(TaskKind::Copy, 12, 1, 8, 11).map_err(err)?;
    let mut rng = Rng::new(12);
    let big = Batch::from_examples((0..8).map(|_| gen.example(&mut rng)).collect());
    let whole = batch_gradient(&model, &big, 0.1, None).map_err(err)?;
    let acc = accumulated_gradient(&model, &big.split(1), 0.1, None).map_err(err)?;
    let scale = whole.grads.iter().flatten().fold(0.0f64, |m, x| m.max(x.abs()));
    let diff = acc.grads.iter().flatten().zip(whole.grads.iter().flatten()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    c.check("accumulation", diff / scale <= 1e-12, format!("8-way accumulation relative difference {:.1e}", diff / scale));

    let mut worst = 0.0f64;
    for v in [2, 7, 16, 8000] {
        for eps in [0.0, 0.1, 0.5] {
            let logits = Tensor::from_fn(&[3, v], |_| 0.37);
            let l = smoothed_loss(&logits, &[Some(0), Some(1), Some(v - 1)], eps).map_err(err)?;
            worst = worst.max((l - (v as f64).ln()).abs());
        }
    }
    c.check("uniform", worst <= 1e-9, format!("uniform-logit loss within {worst:.1e} of ln V"));

    let inv = LrSchedule {
        kind: ScheduleKind::InverseSqrt,
        warmup_steps: 4000,
        lr_start: 0.0,
        lr_peak: 1e-3,
        lr_floor: 0.0,
        total_steps: 0,
    };
    let cos = LrSchedule {
        kind: ScheduleKind::Cosine,
        warmup_steps: 10_000,
        lr_start: 1e-7,
        lr_peak: 1e-3,
        lr_floor: 1e-5,
        total_steps: 50_000,
    };
    let mut jump = 0.0f64;
    for s in [inv, cos] {
        let w = s.warmup_steps as f64;
        for h in [1e-6, 1e-9] {
            jump = jump.max((s.lr_at_real(w - h) - s.lr_at_real(w + h)).abs());
        }
    }
    c.check("continuity", jump <= 1e-12, format!("largest jump across warmup {jump:.1e}"));
    c.check(
        "anchors",
        cos.lr_at(0) == 1e-7 && cos.lr_at(10_000) == 1e-3 && inv.lr_at(4000) == 1e-3,
        format!("cosine starts at {:e}, both peak at {:e}", cos.lr_at(0), inv.lr_at(4000)),
    );
    Ok(c)
}

fn c12_persistence() -> Outcome {
    let mut c = Checks::default();
    let dir = tempfile::tempdir().map_err(err)?;
    let model = Model::build(&lsra_core::model::ModelConfig::small_lsra(14, 32, 2, &[3, 5]), &mut Rng::new(12)).map_err(err)?;
    let path = dir.path().join("m.ltc");
    checkpoint::save_checkpoint(&path, &model).map_err(err)?;
    let loaded = checkpoint::load_checkpoint(&path).map_err(err)?;
    let mut rounded = model.params().clone();
    rounded.round_to_f32();
    let bytes = std::fs::read(&path).map_err(err)?;
    c.check(
        "ltc1",
        loaded.params() == &rounded && checkpoint::encode_checkpoint(&loaded) == bytes,
        format!("LTC1 round trip bit-exact ({} bytes)", bytes.len()),
    );

    let sparsity: BTreeMap<String, f64> = prunable_layers(model.params())
        .into_iter()
        .enumerate()
        .map(|(i, id)| (model.params().name(id).to_string(), [0.0, 0.5, 0.75][i % 3]))
        .collect();
    let cm = compress::compress(&model, &sparsity, 5, &mut Rng::new(13), 30).map_err(err)?;
    let qpath = dir.path().join("m.ltq");
    checkpoint::save_compressed(&qpath, &cm).map_err(err)?;
    let qloaded = checkpoint::load_compressed(&qpath).map_err(err)?;
    c.check("ltq1", qloaded == cm, "LTQ1 round trip bit-exact");
    let (src, tgt) = ([3, 4, 5, 6, 7, 13], [1, 8, 9, 10, 11]);
    let a = cm.to_model().map_err(err)?.logits(&src, &tgt).map_err(err)?;
    let b = qloaded.to_model().map_err(err)?.logits(&src, &tgt).map_err(err)?;
    c.check("forward", a == b, "loaded compressed forward equals the dequantized dense forward");
    Ok(c)
}

fn main() -> ExitCode {
    let mut lsra_copy = None;
    let criteria: Vec<(usize, &str, Box<dyn FnOnce(&mut Option<Model>) -> Outcome>)> = vec![
        (1, "gradient soundness", Box::new(|_| c1_gradients())),
        (2, "cost-model exactness", Box::new(|_| c2_cost_exactness())),
        (3, "base block FFN share", Box::new(|_| c3_base_share())),
        (4, "flattened block attention share", Box::new(|_| c4_flattened_share())),
        (5, "mobile gate", Box::new(|_| c5_mobile_gate())),
        (6, "causality", Box::new(|_| c6_causality())),
        (7, "desk-scale learning", Box::new(c7_learning)),
        (8, "decoding", Box::new(|_| c8_decoding())),
        (9, "compression arithmetic", Box::new(|_| c9_compression())),
        (10, "attention specialization report", Box::new(|m: &mut Option<Model>| c10_specialization(m.take()))),
        (11, "training mechanics", Box::new(|_| c11_training_mechanics())),
        (12, "persistence", Box::new(|_| c12_persistence())),
    ];
    let mut unexpected = 0;
    for (id, title, run) in criteria {
        let start = Instant::now();
        let outcome = run(&mut lsra_copy);
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(c) if c.failures.is_empty() => {
                println!("PASS criterion {id}: {title} [{secs:.1}s]");
                for n in &c.notes {
                    println!("    {n}");
                }
            }
            Ok(c) => {
                let reasons: Vec<&str> = c
                    .failures
                    .iter()
                    .map(|f| EXPECTED_FAILURES.iter().find(|(i, k, _)| *i == id && *k == f.key).map(|(_, _, r)| *r))
                    .collect::<Option<_>>()
                    .unwrap_or_default();
                if reasons.is_empty() {
                    unexpected += 1;
                    println!("FAIL criterion {id}: {title} [{secs:.1}s]");
                } else {
                    println!("FAIL (expected: {}) criterion {id}: {title} [{secs:.1}s]", reasons.join("; "));
                }
                for f in &c.failures {
                    println!("    failed: {}", f.msg);
                }
                for n in &c.notes {
                    println!("    {n}");
                }
            }
            Err(e) => {
                unexpected += 1;
                println!("FAIL criterion {id}: {title}: error: {e}");
            }
        }
    }
    if unexpected > 0 {
        println!("{unexpected} unexpected failure(s)");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
