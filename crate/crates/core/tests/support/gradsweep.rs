// Finite-difference sweep over every differentiable op, layer and block.
// Shared by the core gradient tests and the acceptance suite.

use lsra_core::layers::{self, AttentionParams, ConvBranchParams, ConvMode, Ffn};
use lsra_core::lsra::{self, BlockStyle, DecoderLayer, Dropout, EncoderLayer, LayerSpec};
use lsra_core::model::{Model, ModelConfig, ModelTask};
use lsra_core::params::finite_diff_report_params;
use lsra_core::tensor::finite_diff_check;
use lsra_core::{Graph, ParamStore, Result, Rng, Session, Tensor, Var};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-5;

pub fn rand_tensor(rng: &mut Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.uniform_range(-1.0, 1.0))
}

/// Entries bounded away from zero, for ops with a kink there.
pub fn off_kink(rng: &mut Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.uniform_range(0.05, 1.0);
        if rng.uniform() < 0.5 {
            -m
        } else {
            m
        }
    })
}

/// `Σ out ⊙ r` for a fixed random `r`, so every output coordinate matters.
pub fn project(g: &mut Graph, out: Var, seed: u64) -> Result<Var> {
    let mut rng = Rng::new(seed);
    let r = rand_tensor(&mut rng, g.shape(out));
    let r = g.constant(r);
    let p = g.mul(out, r)?;
    Ok(g.sum(p))
}

fn spec(style: BlockStyle, d: usize, k: usize, mode: ConvMode, glu: bool) -> LayerSpec {
    LayerSpec {
        d_model: d,
        heads: 2,
        style,
        d_ff: if style == BlockStyle::BaseBottleneck { 4 * d } else { d },
        kernel_size: k,
        conv_mode: mode,
        glu,
    }
}

type Check = (String, f64);

fn op<F>(out: &mut Vec<Check>, name: &str, theta: Tensor, mut f: F) -> Result<()>
where
    F: FnMut(&mut Graph, Var) -> Result<Var>,
{
    let e = finite_diff_check(&theta, STEP, |g, x| {
        let y = f(g, x)?;
        if g.shape(y).is_empty() {
            Ok(y)
        } else {
            project(g, y, 99)
        }
    })?;
    out.push((name.to_string(), e));
    Ok(())
}

/// Below this both gradients are roundoff: the parameter cannot influence
/// the loss (a key bias shifts every score of a row equally).
pub const ZERO_GRADIENT: f64 = 1e-9;

fn params<F>(out: &mut Vec<Check>, name: &str, store: &ParamStore, mut f: F) -> Result<()>
where
    F: FnMut(&mut Session<'_>) -> Result<Var>,
{
    let report = finite_diff_report_params(store, STEP, |s| {
        let y = f(s)?;
        project(&mut s.graph, y, 77)
    })?;
    let mut worst: f64 = 0.0;
    for r in report {
        if r.max_analytic < ZERO_GRADIENT && r.max_central < ZERO_GRADIENT {
            let abs = r.max_analytic.max(r.max_central);
            out.push((format!("{name}/{} (zero gradient, absolute)", r.name), abs));
        } else {
            worst = worst.max(r.max_rel_error);
        }
    }
    out.push((name.to_string(), worst));
    Ok(())
}

/// Tensor-level ops, each differentiated with respect to every input.
pub fn op_checks(seed: u64) -> Result<Vec<Check>> {
    let mut rng = Rng::new(seed);
    let mut out = Vec::new();
    let a = rand_tensor(&mut rng, &[3, 4]);
    let b = rand_tensor(&mut rng, &[4, 2]);
    let same = rand_tensor(&mut rng, &[3, 4]);
    let bias = rand_tensor(&mut rng, &[2]);

    let bc = b.clone();
    op(&mut out, "matmul/a", a.clone(), |g, x| {
        let y = g.constant(bc.clone());
        g.matmul(x, y)
    })?;
    let ac = a.clone();
    op(&mut out, "matmul/b", b.clone(), |g, y| {
        let x = g.constant(ac.clone());
        g.matmul(x, y)
    })?;
    op(&mut out, "transpose", a.clone(), |g, x| g.transpose(x))?;
    let (bc, biasc) = (b.clone(), bias.clone());
    op(&mut out, "linear/x", a.clone(), |g, x| {
        let w = g.constant(bc.clone());
        let bb = g.constant(biasc.clone());
        g.linear(x, w, Some(bb))
    })?;
    let (ac, biasc) = (a.clone(), bias.clone());
    op(&mut out, "linear/w", b.clone(), |g, w| {
        let x = g.constant(ac.clone());
        let bb = g.constant(biasc.clone());
        g.linear(x, w, Some(bb))
    })?;
    let (ac, bc) = (a.clone(), b.clone());
    op(&mut out, "linear/b", bias.clone(), |g, bb| {
        let x = g.constant(ac.clone());
        let w = g.constant(bc.clone());
        g.linear(x, w, Some(bb))
    })?;
    let sc = same.clone();
    op(&mut out, "add", a.clone(), |g, x| {
        let y = g.constant(sc.clone());
        g.add(x, y)
    })?;
    let sc = same.clone();
    op(&mut out, "mul", a.clone(), |g, x| {
        let y = g.constant(sc.clone());
        g.mul(x, y)
    })?;
    op(&mut out, "mul/self", a.clone(), |g, x| g.mul(x, x))?;
    op(&mut out, "scale", a.clone(), |g, x| Ok(g.scale(x, -1.7)))?;
    op(&mut out, "relu", off_kink(&mut rng, &[3, 4]), |g, x| Ok(g.relu(x)))?;
    op(&mut out, "glu", rand_tensor(&mut rng, &[3, 6]), |g, x| g.glu(x))?;
    op(&mut out, "softmax/axis0", a.clone(), |g, x| g.softmax(x, 0))?;
    op(&mut out, "softmax/axis1", a.clone(), |g, x| g.softmax(x, 1))?;
    let mask = layers::causal_mask(3);
    op(&mut out, "masked_softmax", rand_tensor(&mut rng, &[2, 3, 3]), |g, x| g.masked_softmax(x, &mask))?;
    let gamma = rand_tensor(&mut rng, &[4]);
    let beta = rand_tensor(&mut rng, &[4]);
    let (gc, bc) = (gamma.clone(), beta.clone());
    op(&mut out, "layer_norm/x", a.clone(), |g, x| {
        let ga = g.constant(gc.clone());
        let be = g.constant(bc.clone());
        g.layer_norm(x, ga, be, 1e-5)
    })?;
    let (ac, bc) = (a.clone(), beta.clone());
    op(&mut out, "layer_norm/gamma", gamma.clone(), |g, ga| {
        let x = g.constant(ac.clone());
        let be = g.constant(bc.clone());
        g.layer_norm(x, ga, be, 1e-5)
    })?;
    let (ac, gc) = (a.clone(), gamma.clone());
    op(&mut out, "layer_norm/beta", beta.clone(), |g, be| {
        let x = g.constant(ac.clone());
        let ga = g.constant(gc.clone());
        g.layer_norm(x, ga, be, 1e-5)
    })?;
    op(&mut out, "sum", a.clone(), |g, x| {
        let y = g.mul(x, x)?;
        Ok(g.sum(y))
    })?;
    op(&mut out, "mean", a.clone(), |g, x| {
        let y = g.mul(x, x)?;
        Ok(g.mean(y))
    })?;
    op(&mut out, "reshape", a.clone(), |g, x| g.reshape(x, &[2, 6]))?;
    op(&mut out, "slice_last", a.clone(), |g, x| g.slice_last(x, 1, 2))?;
    let sc = same.clone();
    op(&mut out, "concat_last", a.clone(), |g, x| {
        let y = g.constant(sc.clone());
        g.concat_last(y, x)
    })?;
    op(&mut out, "concat_rows", a.clone(), |g, x| {
        let y = g.scale(x, 2.0);
        g.concat_rows(&[x, y, x])
    })?;
    let k = rand_tensor(&mut rng, &[5, 4]);
    let kc = k.clone();
    op(&mut out, "attn_scores/q", a.clone(), |g, q| {
        let k = g.constant(kc.clone());
        g.attn_scores(q, k, 2, 0.7)
    })?;
    let ac = a.clone();
    op(&mut out, "attn_scores/k", k.clone(), |g, k| {
        let q = g.constant(ac.clone());
        g.attn_scores(q, k, 2, 0.7)
    })?;
    let w = rand_tensor(&mut rng, &[2, 3, 5]);
    let v = rand_tensor(&mut rng, &[5, 4]);
    let vc = v.clone();
    op(&mut out, "attn_context/w", w.clone(), |g, w| {
        let v = g.constant(vc.clone());
        g.attn_context(w, v)
    })?;
    let wc = w.clone();
    op(&mut out, "attn_context/v", v.clone(), |g, v| {
        let w = g.constant(wc.clone());
        g.attn_context(w, v)
    })?;
    let x = rand_tensor(&mut rng, &[6, 4]);
    let kern = rand_tensor(&mut rng, &[2, 3]);
    for causal in [false, true] {
        let tag = if causal { "causal" } else { "same" };
        let kc = kern.clone();
        op(&mut out, &format!("depthwise_conv/x/{tag}"), x.clone(), |g, x| {
            let k = g.constant(kc.clone());
            g.depthwise_conv(x, k, causal)
        })?;
        let xc = x.clone();
        op(&mut out, &format!("depthwise_conv/kernel/{tag}"), kern.clone(), |g, k| {
            let x = g.constant(xc.clone());
            g.depthwise_conv(x, k, causal)
        })?;
        let dk = rand_tensor(&mut rng, &[6, 2, 5]);
        let dkc = dk.clone();
        op(&mut out, &format!("dynamic_conv/x/{tag}"), x.clone(), |g, x| {
            let k = g.constant(dkc.clone());
            g.dynamic_conv(x, k, causal)
        })?;
        let xc = x.clone();
        op(&mut out, &format!("dynamic_conv/kernels/{tag}"), dk, |g, k| {
            let x = g.constant(xc.clone());
            g.dynamic_conv(x, k, causal)
        })?;
    }
    op(&mut out, "embedding", rand_tensor(&mut rng, &[5, 4]), |g, t| g.embedding(t, &[3, 0, 3, 4], 2.0))?;
    let factors: Vec<f64> = (0..12).map(|i| if i % 3 == 0 { 0.0 } else { 1.25 }).collect();
    op(&mut out, "mul_const", a.clone(), |g, x| g.mul_const(x, factors.clone()))?;
    let targets = [Some(1), None, Some(3)];
    op(&mut out, "smoothed_ce", a.clone(), |g, x| g.smoothed_ce(x, &targets, 0.1))?;
    Ok(out)
}

/// Layers and blocks, differentiated with respect to every parameter and
/// the block input.
pub fn block_checks(seed: u64) -> Result<Vec<Check>> {
    let mut rng = Rng::new(seed);
    let mut out = Vec::new();
    let n = 5;
    let d = 8;
    let x = rand_tensor(&mut rng, &[n, d]);

    let mut store = ParamStore::new();
    let attn = AttentionParams::new(&mut store, &mut rng, "attn", d, 2)?;
    let mem = rand_tensor(&mut rng, &[3, d]);
    let mask = layers::causal_mask(n);
    params(&mut out, "multi_head_attention/params", &store, |s| {
        let q = s.graph.constant(x.clone());
        Ok(layers::multi_head_attention(s, q, q, q, &attn, Some(&mask), 0.0)?.0)
    })?;
    params(&mut out, "cross_attention/params", &store, |s| {
        let q = s.graph.constant(x.clone());
        let kv = s.graph.constant(mem.clone());
        Ok(layers::multi_head_attention(s, q, kv, kv, &attn, None, 0.0)?.0)
    })?;
    op(&mut out, "multi_head_attention/input", x.clone(), |g, xv| {
        let mut s = Session::with_graph(&store, std::mem::take(g), true, None);
        let y = layers::multi_head_attention(&mut s, xv, xv, xv, &attn, None, 0.0)?.0;
        *g = std::mem::take(&mut s.graph);
        Ok(y)
    })?;

    for (mode, glu, causal) in [
        (ConvMode::StaticLightweight, false, false),
        (ConvMode::StaticLightweight, true, true),
        (ConvMode::Dynamic, false, true),
        (ConvMode::Dynamic, true, false),
    ] {
        let mut store = ParamStore::new();
        let conv = ConvBranchParams::new(&mut store, &mut rng, "conv", d, 3, 2, mode, glu, causal)?;
        let name = format!("conv_branch/{mode:?}/glu={glu}/causal={causal}");
        params(&mut out, &format!("{name}/params"), &store, |s| {
            let xv = s.graph.constant(x.clone());
            conv.forward(s, xv)
        })?;
        op(&mut out, &format!("{name}/input"), x.clone(), |g, xv| {
            let mut s = Session::with_graph(&store, std::mem::take(g), true, None);
            let y = conv.forward(&mut s, xv)?;
            *g = std::mem::take(&mut s.graph);
            Ok(y)
        })?;
    }

    let mut store = ParamStore::new();
    let ffn = Ffn::new(&mut store, &mut rng, "ffn", d, 2 * d);
    params(&mut out, "ffn/params", &store, |s| {
        let xv = s.graph.constant(x.clone());
        ffn.forward(s, xv, 0.0)
    })?;

    let mut store = ParamStore::new();
    let ln = layers::LayerNorm::new(&mut store, "ln", d);
    perturb(&mut store, &mut rng);
    params(&mut out, "layer_norm/params", &store, |s| {
        let xv = s.graph.constant(x.clone());
        ln.forward(s, xv)
    })?;

    for style in [BlockStyle::Lsra, BlockStyle::Flattened, BlockStyle::BaseBottleneck] {
        for mode in [ConvMode::StaticLightweight, ConvMode::Dynamic] {
            if style != BlockStyle::Lsra && mode == ConvMode::Dynamic {
                continue;
            }
            let sp = spec(style, d, 3, mode, mode == ConvMode::Dynamic);
            let mut store = ParamStore::new();
            let layer = EncoderLayer::new(&mut store, &mut rng, "enc", &sp)?;
            perturb(&mut store, &mut rng);
            let name = format!("encoder_block/{style:?}/{mode:?}");
            params(&mut out, &format!("{name}/params"), &store, |s| {
                let xv = s.graph.constant(x.clone());
                Ok(layer.forward(s, xv, None, Dropout::default())?.0)
            })?;
            op(&mut out, &format!("{name}/input"), x.clone(), |g, xv| {
                let mut s = Session::with_graph(&store, std::mem::take(g), true, None);
                let y = match style {
                    BlockStyle::Lsra => lsra::lsra_block(&mut s, xv, &layer, None)?.0,
                    _ => lsra::flattened_block(&mut s, xv, &layer, None)?,
                };
                *g = std::mem::take(&mut s.graph);
                Ok(y)
            })?;

            let mut store = ParamStore::new();
            let dec = DecoderLayer::new(&mut store, &mut rng, "dec", &sp, true)?;
            perturb(&mut store, &mut rng);
            params(&mut out, &format!("decoder_layer/{style:?}/{mode:?}/params"), &store, |s| {
                let xv = s.graph.constant(x.clone());
                let enc = s.graph.constant(mem.clone());
                Ok(dec.forward(s, xv, Some(enc), &mask, Dropout::default())?.0)
            })?;
        }
    }

    let mut cfg = ModelConfig::small_lsra(7, 8, 1, &[3]);
    cfg.heads = 2;
    cfg.share_embeddings = false;
    let model = Model::build(&cfg, &mut rng)?;
    model_loss(&mut out, "model/seq2seq/smoothed_ce", &model, |s| {
        let logits = model.forward(s, &[1, 4, 5, 2], &[1, 3, 6])?;
        s.graph.smoothed_ce(logits, &[Some(3), Some(6), Some(2)], 0.1)
    })?;

    let mut lm = ModelConfig::small_lsra(7, 8, 1, &[3]);
    lm.task = ModelTask::Lm;
    lm.n_layers_enc = 0;
    lm.heads = 2;
    lm.conv_mode = ConvMode::StaticLightweight;
    let model = Model::build(&lm, &mut rng)?;
    model_loss(&mut out, "model/lm/smoothed_ce", &model, |s| {
        let logits = model.forward(s, &[], &[1, 4, 5, 3])?;
        s.graph.smoothed_ce(logits, &[Some(4), Some(5), Some(3), Some(2)], 0.1)
    })?;
    Ok(out)
}

/// Like `params` but `f` already returns the scalar loss.
fn model_loss<F>(out: &mut Vec<Check>, name: &str, model: &Model, mut f: F) -> Result<()>
where
    F: FnMut(&mut Session<'_>) -> Result<Var>,
{
    let mut worst: f64 = 0.0;
    for r in finite_diff_report_params(model.params(), STEP, |s| f(s))? {
        if r.max_analytic < ZERO_GRADIENT && r.max_central < ZERO_GRADIENT {
            out.push((format!("{name}/{} (zero gradient, absolute)", r.name), r.max_analytic.max(r.max_central)));
        } else {
            worst = worst.max(r.max_rel_error);
        }
    }
    out.push((name.to_string(), worst));
    Ok(())
}

/// Move norms and zero biases off their initial values so their gradients
/// are exercised in general position.
fn perturb(store: &mut ParamStore, rng: &mut Rng) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for v in store.get_mut(id).data_mut() {
            *v += 0.1 * rng.uniform_range(-1.0, 1.0);
        }
    }
}
