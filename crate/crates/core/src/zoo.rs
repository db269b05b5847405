//! A family of tiny video classifiers with deliberately different temporal
//! structure, plus deterministic training and checkpointing.
//!
//! Three families:
//! - `early-pool` collapses the temporal axis in layer 1 (global temporal
//!   mean), so it is exactly equivariant to circular temporal shifts of its
//!   input and never sees frame order.
//! - `full-3d` uses 3-D kernels with temporal extent throughout.
//! - `late-temporal` is per-frame 2-D until a final temporal convolution
//!   head.

use std::collections::HashSet;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::container;
use crate::error::{Error, Result};
use crate::graph::{Activation, Affine, AvgPool, ComputeGraph, Conv3d, Layer, Padding};
use crate::tensor::{Label, Tensor, VideoClip};

/// Architecture family name.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ArchFamily {
    #[serde(rename = "early-pool")]
    EarlyPool,
    #[serde(rename = "full-3d")]
    Full3d,
    #[serde(rename = "late-temporal")]
    LateTemporal,
}

impl ArchFamily {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "early-pool" => Ok(ArchFamily::EarlyPool),
            "full-3d" => Ok(ArchFamily::Full3d),
            "late-temporal" => Ok(ArchFamily::LateTemporal),
            other => Err(Error::Spec(format!(
                "unknown architecture {other:?} (expected early-pool, full-3d or late-temporal)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ArchFamily::EarlyPool => "early-pool",
            ArchFamily::Full3d => "full-3d",
            ArchFamily::LateTemporal => "late-temporal",
        }
    }
}

/// Declarative model specification; `build_model` materializes it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub family: ArchFamily,
    /// Input shape T×H×W×C.
    pub input: [usize; 4],
    pub classes: usize,
    /// Channel widths of the convolution stack.
    pub conv_channels: Vec<usize>,
    /// Temporal kernel extent of the late-temporal head (odd).
    pub temporal_kernel: usize,
    pub seed: u64,
}

impl ArchSpec {
    pub fn new(family: ArchFamily, input: [usize; 4], classes: usize, seed: u64) -> Self {
        let conv_channels = match family {
            ArchFamily::EarlyPool => vec![6, 8],
            ArchFamily::Full3d => vec![6, 8, 8],
            ArchFamily::LateTemporal => vec![6, 8, 8],
        };
        ArchSpec { family, input, classes, conv_channels, temporal_kernel: 5, seed }
    }
}

fn glorot_uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let len: usize = shape.iter().product();
    let data = (0..len).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::from_vec(shape, data).expect("init shape")
}

fn conv_layer(
    rng: &mut ChaCha8Rng,
    kernel: [usize; 3],
    c_in: usize,
    c_out: usize,
) -> Layer {
    let [kt, kh, kw] = kernel;
    let fan_in = kt * kh * kw * c_in;
    let fan_out = kt * kh * kw * c_out;
    Layer::Conv3d(Conv3d {
        weight: glorot_uniform(rng, &[c_out, kt, kh, kw, c_in], fan_in, fan_out),
        bias: Tensor::zeros(&[c_out]),
        padding: Padding::Same,
    })
}

fn affine_layer(rng: &mut ChaCha8Rng, n_in: usize, n_out: usize) -> Layer {
    Layer::Affine(Affine {
        weight: glorot_uniform(rng, &[n_out, n_in], n_in, n_out),
        bias: Tensor::zeros(&[n_out]),
    })
}

/// Builds the layer chain for `spec` with parameters initialized
/// deterministically from `spec.seed`.
pub fn build_model(spec: &ArchSpec) -> Result<ComputeGraph> {
    let [t, h, w, c] = spec.input;
    if spec.classes < 2 {
        return Err(Error::Spec("need at least 2 classes".into()));
    }
    if spec.conv_channels.is_empty() {
        return Err(Error::Spec("need at least one conv layer".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut layers = Vec::new();
    match spec.family {
        ArchFamily::EarlyPool => {
            // collapse time first; everything after is per-"frame" 2-D
            layers.push(Layer::AvgPool(AvgPool { window: [t, 1, 1] }));
            let mut ch = c;
            for &width in &spec.conv_channels {
                layers.push(conv_layer(&mut rng, [1, 3, 3], ch, width));
                layers.push(Layer::Activation(Activation::Tanh));
                layers.push(Layer::AvgPool(AvgPool { window: [1, 2, 2] }));
                ch = width;
            }
            // position-sensitive head: flatten the spatial map directly
            let spatial = (h >> spec.conv_channels.len()) * (w >> spec.conv_channels.len());
            layers.push(Layer::Flatten);
            layers.push(affine_layer(&mut rng, spatial * ch, spec.classes));
        }
        ArchFamily::Full3d => {
            let mut ch = c;
            let mut dims = [t, h, w];
            for &width in &spec.conv_channels {
                layers.push(conv_layer(&mut rng, [3, 3, 3], ch, width));
                layers.push(Layer::Activation(Activation::Tanh));
                let wt = if dims[0] % 2 == 0 { 2 } else { 1 };
                layers.push(Layer::AvgPool(AvgPool { window: [wt, 2, 2] }));
                dims = [dims[0] / wt, dims[1] / 2, dims[2] / 2];
                ch = width;
            }
            layers.push(Layer::AvgPool(AvgPool { window: dims }));
            layers.push(Layer::Flatten);
            layers.push(affine_layer(&mut rng, ch, spec.classes));
        }
        ArchFamily::LateTemporal => {
            if spec.temporal_kernel % 2 == 0 {
                return Err(Error::Spec("temporal head kernel must be odd".into()));
            }
            let mut ch = c;
            let mut dims = [t, h, w];
            let (head, body) = spec
                .conv_channels
                .split_last()
                .expect("nonempty conv stack");
            for &width in body {
                layers.push(conv_layer(&mut rng, [1, 3, 3], ch, width));
                layers.push(Layer::Activation(Activation::Tanh));
                layers.push(Layer::AvgPool(AvgPool { window: [1, 2, 2] }));
                dims = [dims[0], dims[1] / 2, dims[2] / 2];
                ch = width;
            }
            // temporal convolution head: the only place frame order enters
            layers.push(conv_layer(&mut rng, [spec.temporal_kernel, 3, 3], ch, *head));
            layers.push(Layer::Activation(Activation::Tanh));
            layers.push(Layer::AvgPool(AvgPool { window: dims }));
            layers.push(Layer::Flatten);
            layers.push(affine_layer(&mut rng, *head, spec.classes));
        }
    }
    ComputeGraph::new(layers, &spec.input)
}

/// Argmax of the logits; ties resolve to the lowest class index.
pub fn predict(model: &mut ComputeGraph, clip: &VideoClip) -> Result<Label> {
    let logits = model.forward(clip)?;
    Ok(argmax_label(&logits))
}

pub fn argmax_label(logits: &Tensor) -> Label {
    let mut best = 0;
    for (i, &v) in logits.data().iter().enumerate() {
        if v > logits.data()[best] {
            best = i;
        }
    }
    Label(best)
}

/// Mini-batch SGD settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Layer indices excluded from parameter updates.
    #[serde(default)]
    pub frozen_layers: Vec<usize>,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.learning_rate <= 0.0 {
            return Err(Error::Spec("batch size and learning rate must be positive".into()));
        }
        Ok(())
    }
}

/// Training metadata stored alongside the parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainMeta {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub final_train_accuracy: f64,
    pub final_eval_accuracy: f64,
    pub train_loss_per_epoch: Vec<f64>,
}

/// A trained (or freshly initialized) model: spec, named parameters and
/// training metadata.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub spec: ArchSpec,
    pub params: Vec<(String, Tensor)>,
    pub meta: TrainMeta,
}

impl Checkpoint {
    /// Rebuilds the compute graph and loads the stored parameters into it.
    pub fn instantiate(&self) -> Result<ComputeGraph> {
        let mut model = build_model(&self.spec)?;
        load_params(&mut model, &self.params)?;
        Ok(model)
    }
}

fn load_params(model: &mut ComputeGraph, params: &[(String, Tensor)]) -> Result<()> {
    let expected: Vec<String> = model.named_params().iter().map(|(n, _)| n.clone()).collect();
    let got: Vec<String> = params.iter().map(|(n, _)| n.clone()).collect();
    if expected != got {
        return Err(Error::Spec(format!(
            "parameter names {got:?} do not match architecture {expected:?}"
        )));
    }
    for (name, tensor) in params {
        let idx: usize = name
            .trim_start_matches("layer")
            .split('.')
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Spec(format!("bad parameter name {name:?}")))?;
        let kind = if name.ends_with(".weight") {
            crate::graph::ParamKind::Weight
        } else {
            crate::graph::ParamKind::Bias
        };
        let slot = model
            .param_mut(idx, kind)
            .ok_or_else(|| Error::Spec(format!("layer {idx} carries no parameters")))?;
        if slot.shape() != tensor.shape() {
            return Err(Error::Spec(format!(
                "parameter {name:?} shape {:?} does not match model {:?}",
                tensor.shape(),
                slot.shape()
            )));
        }
        *slot = tensor.clone();
    }
    Ok(())
}

fn snapshot_params(model: &ComputeGraph) -> Vec<(String, Tensor)> {
    model
        .named_params()
        .into_iter()
        .map(|(n, t)| (n, t.clone()))
        .collect()
}

pub fn accuracy(model: &mut ComputeGraph, set: &[(Tensor, Label)]) -> Result<f64> {
    if set.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for (x, y) in set {
        let logits = model.forward_tensor(x)?;
        if argmax_label(&logits) == *y {
            correct += 1;
        }
    }
    Ok(correct as f64 / set.len() as f64)
}

/// Plain mini-batch SGD. Deterministic given the config seed; returns a
/// checkpoint with final train/eval accuracies and the per-epoch loss curve.
pub fn train(
    spec: &ArchSpec,
    train_set: &[(Tensor, Label)],
    eval_set: &[(Tensor, Label)],
    cfg: &TrainConfig,
) -> Result<Checkpoint> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Spec("training set is empty".into()));
    }
    for (_, y) in train_set.iter().chain(eval_set) {
        y.validate(spec.classes)?;
    }
    let mut model = build_model(spec)?;
    let frozen: HashSet<usize> = cfg.frozen_layers.iter().copied().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut loss_history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        shuffle(&mut order, &mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<(Tensor, Label)> =
                chunk.iter().map(|&i| train_set[i].clone()).collect();
            let mut batch_loss = 0.0;
            for (x, y) in &batch {
                batch_loss += model.loss_value(x, *y).map_err(|e| Error::Training {
                    epoch,
                    reason: e.to_string(),
                })?;
            }
            epoch_loss += batch_loss / batch.len() as f64;
            batches += 1;
            let grads = model.param_gradient(&batch).map_err(|e| Error::Training {
                epoch,
                reason: e.to_string(),
            })?;
            for (layer_idx, grad) in grads.iter().enumerate() {
                if frozen.contains(&layer_idx) {
                    continue;
                }
                if let Some(g) = grad {
                    let w = model
                        .param_mut(layer_idx, crate::graph::ParamKind::Weight)
                        .expect("weight");
                    w.add_scaled(&g.weight, -cfg.learning_rate);
                    let b = model
                        .param_mut(layer_idx, crate::graph::ParamKind::Bias)
                        .expect("bias");
                    b.add_scaled(&g.bias, -cfg.learning_rate);
                }
            }
        }
        loss_history.push(if batches > 0 { epoch_loss / batches as f64 } else { 0.0 });
    }
    let final_train_accuracy = accuracy(&mut model, train_set)?;
    let final_eval_accuracy = accuracy(&mut model, eval_set)?;
    Ok(Checkpoint {
        spec: spec.clone(),
        params: snapshot_params(&model),
        meta: TrainMeta {
            epochs: cfg.epochs,
            batch_size: cfg.batch_size,
            learning_rate: cfg.learning_rate,
            seed: cfg.seed,
            final_train_accuracy,
            final_eval_accuracy,
            train_loss_per_epoch: loss_history,
        },
    })
}

fn shuffle(order: &mut [usize], rng: &mut ChaCha8Rng) {
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointManifest {
    spec: ArchSpec,
    meta: TrainMeta,
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let manifest = CheckpointManifest { spec: ckpt.spec.clone(), meta: ckpt.meta.clone() };
    container::save(path, "checkpoint", &manifest, &ckpt.params)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let (manifest, params): (CheckpointManifest, _) = container::load(path, "checkpoint")?;
    let ckpt = Checkpoint { spec: manifest.spec, params, meta: manifest.meta };
    // surface name/shape mismatches at load time
    ckpt.instantiate()?;
    Ok(ckpt)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_input() -> [usize; 4] {
        [4, 8, 8, 1]
    }

    #[test]
    fn same_spec_and_seed_build_identical_parameters() {
        let spec = ArchSpec::new(ArchFamily::Full3d, tiny_input(), 4, 11);
        let a = build_model(&spec).unwrap();
        let b = build_model(&spec).unwrap();
        for ((na, ta), (nb, tb)) in a.named_params().iter().zip(b.named_params().iter()) {
            assert_eq!(na, nb);
            let bits_a: Vec<u64> = ta.data().iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u64> = tb.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b);
        }
    }

    #[test]
    fn early_pool_collapses_time_in_layer_one() {
        let spec = ArchSpec::new(ArchFamily::EarlyPool, tiny_input(), 4, 1);
        let model = build_model(&spec).unwrap();
        assert_eq!(model.boundary_shape(1)[0], 1, "temporal extent after layer 1");
    }

    #[test]
    fn logit_count_equals_classes() {
        for family in [ArchFamily::EarlyPool, ArchFamily::Full3d, ArchFamily::LateTemporal] {
            let spec = ArchSpec::new(family, tiny_input(), 5, 2);
            let model = build_model(&spec).unwrap();
            assert_eq!(model.num_classes(), 5);
        }
    }

    #[test]
    fn predict_breaks_ties_toward_lower_index() {
        let logits = Tensor::from_vec(&[3], vec![0.5, 0.5, 0.1]).unwrap();
        assert_eq!(argmax_label(&logits), Label(0));
        let logits = Tensor::from_vec(&[2], vec![0.1, 0.9]).unwrap();
        assert_eq!(argmax_label(&logits), Label(1));
    }

    fn brightness_dataset() -> Vec<(Tensor, Label)> {
        // classes differ in frame-0 mean brightness
        let mut out = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for i in 0..16 {
            let class = i % 2;
            let base = if class == 0 { 0.2 } else { 0.8 };
            let mut t = Tensor::filled(&tiny_input(), 0.5);
            let fl = t.frame_len();
            for v in &mut t.data_mut()[..fl] {
                *v = base + rng.gen_range(-0.05..0.05);
            }
            out.push((t, Label(class)));
        }
        out
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let spec = ArchSpec::new(ArchFamily::EarlyPool, tiny_input(), 2, 3);
        let data = brightness_dataset();
        let cfg = TrainConfig {
            epochs: 0,
            batch_size: 4,
            learning_rate: 0.1,
            seed: 1,
            frozen_layers: vec![],
        };
        let ckpt = train(&spec, &data, &data, &cfg).unwrap();
        let fresh = build_model(&spec).unwrap();
        for ((_, trained), (_, init)) in ckpt.params.iter().zip(fresh.named_params()) {
            assert_eq!(trained.data(), init.data());
        }
    }

    #[test]
    fn frozen_layer_is_not_updated() {
        let spec = ArchSpec::new(ArchFamily::EarlyPool, tiny_input(), 2, 3);
        let model = build_model(&spec).unwrap();
        let frozen_layer = model.param_layers()[0];
        let data = brightness_dataset();
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 1,
            learning_rate: 0.1,
            seed: 1,
            frozen_layers: vec![frozen_layer],
        };
        let ckpt = train(&spec, &data[..1], &[], &cfg).unwrap();
        let fresh = build_model(&spec).unwrap();
        let name = format!("layer{frozen_layer}.weight");
        let trained = &ckpt.params.iter().find(|(n, _)| *n == name).unwrap().1;
        let init = fresh.named_params().iter().find(|(n, _)| *n == name).unwrap().1.clone();
        assert_eq!(trained.data(), init.data());
        // a non-frozen layer did move
        let moved = ckpt
            .params
            .iter()
            .zip(fresh.named_params())
            .any(|((_, a), (_, b))| a.data() != b.data());
        assert!(moved);
    }

    #[test]
    fn sanity_benchmark_reaches_full_train_accuracy() {
        let spec = ArchSpec::new(ArchFamily::EarlyPool, tiny_input(), 2, 9);
        let data = brightness_dataset();
        let cfg = TrainConfig {
            epochs: 20,
            batch_size: 4,
            learning_rate: 0.5,
            seed: 2,
            frozen_layers: vec![],
        };
        let ckpt = train(&spec, &data, &data, &cfg).unwrap();
        assert_eq!(ckpt.meta.final_train_accuracy, 1.0);
        // training is monotone on the sanity benchmark
        let first = ckpt.meta.train_loss_per_epoch[0];
        let last = *ckpt.meta.train_loss_per_epoch.last().unwrap();
        assert!(last < first, "loss should fall: {first} -> {last}");
        // trained model predicts its own training labels
        let mut model = ckpt.instantiate().unwrap();
        let (x, y) = &data[0];
        let clip = VideoClip::new(x.clone()).unwrap();
        assert_eq!(predict(&mut model, &clip).unwrap(), *y);
    }

    #[test]
    fn training_is_deterministic() {
        let spec = ArchSpec::new(ArchFamily::EarlyPool, tiny_input(), 2, 9);
        let data = brightness_dataset();
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 4,
            learning_rate: 0.2,
            seed: 4,
            frozen_layers: vec![],
        };
        let a = train(&spec, &data, &data, &cfg).unwrap();
        let b = train(&spec, &data, &data, &cfg).unwrap();
        let bytes_a = container::to_bytes(
            "checkpoint",
            &CheckpointManifest { spec: a.spec.clone(), meta: a.meta.clone() },
            &a.params,
        )
        .unwrap();
        let bytes_b = container::to_bytes(
            "checkpoint",
            &CheckpointManifest { spec: b.spec.clone(), meta: b.meta.clone() },
            &b.params,
        )
        .unwrap();
        assert_eq!(bytes_a, bytes_b);
    }

    #[test]
    fn checkpoint_round_trip_preserves_logits_bit_for_bit() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let spec = ArchSpec::new(ArchFamily::LateTemporal, tiny_input(), 3, 21);
        let data = brightness_dataset()
            .into_iter()
            .map(|(t, y)| (t, Label(y.0.min(2))))
            .collect::<Vec<_>>();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 4,
            learning_rate: 0.1,
            seed: 8,
            frozen_layers: vec![],
        };
        let ckpt = train(&spec, &data, &[], &cfg).unwrap();
        save_checkpoint(&ckpt, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        // save -> load -> save produces identical bytes
        let path2 = dir.path().join("m2.ckpt");
        save_checkpoint(&loaded, &path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
        // logits identical bit-for-bit
        let x = Tensor::filled(&tiny_input(), 0.4);
        let a = ckpt.instantiate().unwrap().forward_tensor(&x).unwrap();
        let b = loaded.instantiate().unwrap().forward_tensor(&x).unwrap();
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }
}
