//! Post-training compression: sensitivity-guided magnitude pruning and
//! k-means weight sharing, with byte-exact size accounting.
//!
//! Only matrices (parameters named `*.weight`) are pruned and quantized;
//! biases, norm parameters and static conv kernels stay dense at 32 bits.
//! A quantized layer costs `⌈nnz·bits/8⌉` index bytes plus 4 bytes per
//! centroid, and when pruned, a 4-byte nonzero count plus a bitmap of
//! `⌈n/8⌉` bytes.

mod kmeans;

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::model::{Model, ModelConfig};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;
use crate::{Error, Result, Rng};

pub use kmeans::{kmeans_1d, KMeans};

/// Default sparsity grid for [`sensitivity_scan`].
pub const SPARSITY_GRID: [f64; 9] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];

pub fn is_prunable(name: &str) -> bool {
    name.ends_with(".weight")
}

pub fn prunable_layers(store: &ParamStore) -> Vec<ParamId> {
    store.ids().filter(|&id| is_prunable(store.name(id))).collect()
}

/// Zero the `⌊s·n⌋` smallest-magnitude entries (ties: lower flat index
/// first). Returns the keep mask.
pub fn prune_weights(w: &mut [f64], sparsity: f64) -> Result<Vec<bool>> {
    if !(0.0..1.0).contains(&sparsity) {
        return Err(Error::contract(format!("sparsity {sparsity} outside [0, 1)")));
    }
    let k = (sparsity * w.len() as f64) as usize;
    let mut order: Vec<usize> = (0..w.len()).collect();
    order.sort_by(|&a, &b| w[a].abs().total_cmp(&w[b].abs()).then(a.cmp(&b)));
    let mut keep = vec![true; w.len()];
    for &i in &order[..k] {
        w[i] = 0.0;
        keep[i] = false;
    }
    Ok(keep)
}

/// Prune each named layer of `model` in place and return its keep mask.
pub fn prune(model: &mut Model, sparsity: &BTreeMap<String, f64>) -> Result<BTreeMap<String, Vec<bool>>> {
    let mut masks = BTreeMap::new();
    for (name, &s) in sparsity {
        let id = model
            .params()
            .find(name)
            .filter(|_| is_prunable(name))
            .ok_or_else(|| Error::contract(format!("`{name}` is not a prunable layer")))?;
        let mask = prune_weights(model.params_mut().get_mut(id).data_mut(), s)?;
        masks.insert(name.clone(), mask);
    }
    Ok(masks)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSensitivity {
    pub layer: String,
    pub numel: usize,
    /// `(sparsity, eval-loss delta)` with strictly increasing sparsity.
    pub records: Vec<(f64, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensitivityProfile {
    pub baseline_loss: f64,
    pub layers: Vec<LayerSensitivity>,
}

/// Prune one layer at a time to each sparsity in `grid`, record the change
/// in `eval`, and restore it. The model is bit-identical afterwards.
pub fn sensitivity_scan<F>(model: &mut Model, mut eval: F, grid: &[f64]) -> Result<SensitivityProfile>
where
    F: FnMut(&Model) -> Result<f64>,
{
    if grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::contract("sparsity grid must be strictly increasing"));
    }
    let baseline = eval(model)?;
    if !baseline.is_finite() {
        return Err(Error::numeric(format!("baseline eval loss is {baseline}")));
    }
    let mut layers = Vec::new();
    for id in prunable_layers(model.params()) {
        let name = model.params().name(id).to_string();
        let saved = model.params().get(id).clone();
        let mut records = Vec::with_capacity(grid.len());
        for &s in grid {
            let pruned = prune_weights(model.params_mut().get_mut(id).data_mut(), s);
            let loss = pruned.and_then(|_| eval(model));
            model.params_mut().get_mut(id).data_mut().copy_from_slice(saved.data());
            let loss = loss?;
            if !loss.is_finite() {
                return Err(Error::numeric(format!("eval loss {loss} for `{name}` at sparsity {s}")));
            }
            records.push((s, loss - baseline));
        }
        layers.push(LayerSensitivity {
            layer: name,
            numel: saved.numel(),
            records,
        });
    }
    Ok(SensitivityProfile {
        baseline_loss: baseline,
        layers,
    })
}

/// Choose per-layer sparsities that reach `target` overall sparsity across
/// the profiled layers, each time advancing the layer whose next grid step
/// costs the least loss per additionally pruned weight.
pub fn allocate_sparsity(profile: &SensitivityProfile, target: f64) -> Result<BTreeMap<String, f64>> {
    if !(0.0..1.0).contains(&target) {
        return Err(Error::contract(format!("target sparsity {target} outside [0, 1)")));
    }
    let total: usize = profile.layers.iter().map(|l| l.numel).sum();
    let goal = target * total as f64;
    let mut level: Vec<Option<usize>> = vec![None; profile.layers.len()];
    let pruned = |level: &[Option<usize>]| -> f64 {
        profile
            .layers
            .iter()
            .zip(level)
            .map(|(l, lv)| lv.map_or(0.0, |i| l.records[i].0 * l.numel as f64))
            .sum()
    };
    while pruned(&level) < goal {
        let mut best: Option<(usize, f64)> = None;
        for (li, l) in profile.layers.iter().enumerate() {
            let next = level[li].map_or(0, |i| i + 1);
            let Some(&(s, delta)) = l.records.get(next) else { continue };
            let (s0, d0) = level[li].map_or((0.0, 0.0), |i| l.records[i]);
            let gain = (s - s0) * l.numel as f64;
            if gain <= 0.0 {
                continue;
            }
            let cost = (delta - d0) / gain;
            if best.is_none_or(|(_, c)| cost < c) {
                best = Some((li, cost));
            }
        }
        let Some((li, _)) = best else {
            return Err(Error::contract("target sparsity unreachable on the profiled grid"));
        };
        level[li] = Some(level[li].map_or(0, |i| i + 1));
    }
    Ok(profile
        .layers
        .iter()
        .zip(&level)
        .map(|(l, lv)| (l.layer.clone(), lv.map_or(0.0, |i| l.records[i].0)))
        .collect())
}

/// Weight-shared layer: a codebook plus one index per stored weight.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedLayer {
    pub name: String,
    pub shape: Vec<usize>,
    pub bits: u32,
    pub codebook: Vec<f32>,
    /// One per kept weight (all weights when `mask` is `None`), in flat
    /// order.
    pub indices: Vec<u32>,
    /// Keep bitmap when the layer was pruned.
    pub mask: Option<Vec<bool>>,
}

impl QuantizedLayer {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn dequantize(&self) -> Tensor {
        let mut data = vec![0.0; self.numel()];
        match &self.mask {
            None => {
                for (d, &i) in data.iter_mut().zip(&self.indices) {
                    *d = f64::from(self.codebook[i as usize]);
                }
            }
            Some(mask) => {
                let kept = mask.iter().enumerate().filter(|(_, k)| **k).map(|(i, _)| i);
                for (pos, &i) in kept.zip(&self.indices) {
                    data[pos] = f64::from(self.codebook[i as usize]);
                }
            }
        }
        Tensor::new(&self.shape, data).expect("shape matches element count")
    }

    /// Storage cost in bytes.
    pub fn bytes(&self) -> u64 {
        let index_bits = self.indices.len() as u64 * u64::from(self.bits);
        let mut b = index_bits.div_ceil(8) + 4 * self.codebook.len() as u64;
        if self.mask.is_some() {
            b += 4 + (self.numel() as u64).div_ceil(8);
        }
        b
    }
}

fn check_bits(bits: u32) -> Result<()> {
    if !(1..=16).contains(&bits) {
        return Err(Error::contract(format!("bit width {bits} outside [1, 16]")));
    }
    Ok(())
}

/// k-means weight sharing of a flat array with `2^bits` clusters.
pub fn quantize_kmeans(weights: &[f64], bits: u32, rng: &mut Rng, iters: usize) -> Result<QuantizedLayer> {
    quantize_layer("weights", &[weights.len()], weights, None, bits, rng, iters)
}

/// Quantize a (possibly pruned) layer; pruned positions bypass the
/// codebook.
pub fn quantize_layer(
    name: &str,
    shape: &[usize],
    weights: &[f64],
    mask: Option<&[bool]>,
    bits: u32,
    rng: &mut Rng,
    iters: usize,
) -> Result<QuantizedLayer> {
    check_bits(bits)?;
    let values: Vec<f64> = match mask {
        Some(m) => weights.iter().zip(m).filter(|(_, k)| **k).map(|(w, _)| *w).collect(),
        None => weights.to_vec(),
    };
    let km = kmeans_1d(&values, 1usize << bits, rng, iters)?;
    Ok(QuantizedLayer {
        name: name.to_string(),
        shape: shape.to_vec(),
        bits,
        codebook: km.centroids.iter().map(|&c| c as f32).collect(),
        indices: km.assignment.iter().map(|&a| a as u32).collect(),
        mask: mask.map(<[bool]>::to_vec),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub enum CompressedParam {
    /// Stored as 32-bit floats (values already rounded).
    Dense { name: String, tensor: Tensor },
    Quantized(QuantizedLayer),
}

impl CompressedParam {
    pub fn name(&self) -> &str {
        match self {
            CompressedParam::Dense { name, .. } => name,
            CompressedParam::Quantized(q) => &q.name,
        }
    }

    pub fn bytes(&self) -> u64 {
        match self {
            CompressedParam::Dense { tensor, .. } => 4 * tensor.numel() as u64,
            CompressedParam::Quantized(q) => q.bytes(),
        }
    }
}

/// A model whose matrices are pruned and weight-shared; parameters are in
/// manifest order.
#[derive(Clone, Debug, PartialEq)]
pub struct CompressedModel {
    pub config: ModelConfig,
    pub params: Vec<CompressedParam>,
}

impl CompressedModel {
    /// Dense model holding exactly the dequantized values.
    pub fn to_model(&self) -> Result<Model> {
        let mut store = ParamStore::new();
        for p in &self.params {
            match p {
                CompressedParam::Dense { name, tensor } => store.add(name.clone(), tensor.clone()),
                CompressedParam::Quantized(q) => store.add(q.name.clone(), q.dequantize()),
            };
        }
        Model::from_params(&self.config, &store)
    }
}

/// Prune the layers named in `sparsity`, then quantize every matrix to
/// `bits` bits; everything else is rounded to 32-bit floats.
pub fn compress(model: &Model, sparsity: &BTreeMap<String, f64>, bits: u32, rng: &mut Rng, iters: usize) -> Result<CompressedModel> {
    check_bits(bits)?;
    let mut pruned = Model::from_params(model.config(), model.params())?;
    let masks = prune(&mut pruned, sparsity)?;
    let store = pruned.params();
    let mut params = Vec::with_capacity(store.len());
    for id in store.ids() {
        let name = store.name(id);
        let t = store.get(id);
        if is_prunable(name) {
            let mask = masks.get(name).filter(|_| sparsity.get(name).is_some_and(|&s| s > 0.0));
            let q = quantize_layer(name, t.shape(), t.data(), mask.map(|m| m.as_slice()), bits, rng, iters)?;
            params.push(CompressedParam::Quantized(q));
        } else {
            let mut tensor = t.clone();
            tensor.data_mut().iter_mut().for_each(|x| *x = *x as f32 as f64);
            params.push(CompressedParam::Dense {
                name: name.to_string(),
                tensor,
            });
        }
    }
    Ok(CompressedModel {
        config: model.config().clone(),
        params,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SizeReport {
    pub dense_bytes: u64,
    pub compressed_bytes: u64,
    pub ratio: f64,
}

impl SizeReport {
    fn new(dense_bytes: u64, compressed_bytes: u64) -> Self {
        Self {
            dense_bytes,
            compressed_bytes,
            ratio: dense_bytes as f64 / compressed_bytes as f64,
        }
    }
}

/// Size of quantized layers against 32-bit dense storage of the same
/// weights.
pub fn layers_size(layers: &[QuantizedLayer]) -> SizeReport {
    let dense = layers.iter().map(|q| 4 * q.numel() as u64).sum();
    SizeReport::new(dense, layers.iter().map(QuantizedLayer::bytes).sum())
}

/// Size of a whole compressed model against its 32-bit dense form.
pub fn compressed_size(model: &CompressedModel) -> SizeReport {
    let dense = model
        .params
        .iter()
        .map(|p| match p {
            CompressedParam::Dense { tensor, .. } => 4 * tensor.numel() as u64,
            CompressedParam::Quantized(q) => 4 * q.numel() as u64,
        })
        .sum();
    SizeReport::new(dense, model.params.iter().map(CompressedParam::bytes).sum())
}
