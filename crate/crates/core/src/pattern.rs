//! Per-frame importance measurement and cross-model rank correlation of
//! discriminative temporal patterns.
//!
//! Importance of frame i is measured three ways: the loss change when the
//! frame is zeroed, the loss change when it is replaced by the mean of its
//! temporal neighbors, and the spatial mean of the frame's slice of a
//! gradient-weighted class activation map taken at the final convolution
//! layer. Profiles are compared across models with Spearman's rank
//! correlation, descending importance, ties broken by lower frame index.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::ComputeGraph;
use crate::loss;
use crate::synth::LabeledClip;
use crate::tensor::{Label, Tensor, VideoClip};
use crate::zoo::argmax_label;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImportanceMethod {
    GradCam,
    ZeroPad,
    MeanPad,
}

impl ImportanceMethod {
    pub fn name(&self) -> &'static str {
        match self {
            ImportanceMethod::GradCam => "gradcam",
            ImportanceMethod::ZeroPad => "zeropad",
            ImportanceMethod::MeanPad => "meanpad",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "gradcam" => Ok(ImportanceMethod::GradCam),
            "zeropad" => Ok(ImportanceMethod::ZeroPad),
            "meanpad" => Ok(ImportanceMethod::MeanPad),
            other => Err(Error::Spec(format!("unknown importance method {other:?}"))),
        }
    }
}

/// Importance of every frame of one clip under one model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImportanceProfile {
    pub model_id: String,
    pub clip_id: String,
    pub method: ImportanceMethod,
    pub values: Vec<f64>,
}

fn masked_loss_delta(
    model: &mut ComputeGraph,
    clip: &VideoClip,
    y: Label,
    replace: impl Fn(usize, &Tensor) -> Vec<f64>,
) -> Result<Vec<f64>> {
    let x = clip.tensor();
    let base = model.loss_value(x, y)?;
    let t = x.frames();
    let mut deltas = Vec::with_capacity(t);
    for i in 0..t {
        let mut masked = x.clone();
        let replacement = replace(i, x);
        masked.frame_mut(i).copy_from_slice(&replacement);
        deltas.push(model.loss_value(&masked, y)? - base);
    }
    Ok(deltas)
}

/// Importance via zeroing frame i: `p_i = J(x·M_i, y) - J(x, y)`.
pub fn importance_zero_pad(
    model: &mut ComputeGraph,
    model_id: &str,
    clip: &VideoClip,
    clip_id: &str,
    y: Label,
) -> Result<ImportanceProfile> {
    let values = masked_loss_delta(model, clip, y, |i, x| vec![0.0; x.frame(i).len()])?;
    Ok(ImportanceProfile {
        model_id: model_id.to_string(),
        clip_id: clip_id.to_string(),
        method: ImportanceMethod::ZeroPad,
        values,
    })
}

/// Importance via replacing frame i with the mean of its temporal
/// neighbors. The first frame uses only the next frame, the last only the
/// previous one.
pub fn importance_mean_pad(
    model: &mut ComputeGraph,
    model_id: &str,
    clip: &VideoClip,
    clip_id: &str,
    y: Label,
) -> Result<ImportanceProfile> {
    let t = clip.tensor().frames();
    let values = masked_loss_delta(model, clip, y, |i, x| {
        if i == 0 {
            x.frame(1).to_vec()
        } else if i == t - 1 {
            x.frame(t - 2).to_vec()
        } else {
            x.frame(i - 1)
                .iter()
                .zip(x.frame(i + 1))
                .map(|(a, b)| (a + b) / 2.0)
                .collect()
        }
    })?;
    Ok(ImportanceProfile {
        model_id: model_id.to_string(),
        clip_id: clip_id.to_string(),
        method: ImportanceMethod::MeanPad,
        values,
    })
}

/// Linear interpolation of a temporal profile from its native length to
/// `target` samples, endpoints aligned.
fn interpolate_time(values: &[f64], target: usize) -> Vec<f64> {
    let n = values.len();
    if n == target {
        return values.to_vec();
    }
    if n == 1 {
        return vec![values[0]; target];
    }
    (0..target)
        .map(|i| {
            let src = i as f64 * (n - 1) as f64 / (target - 1) as f64;
            let lo = src.floor() as usize;
            let frac = src - lo as f64;
            if frac == 0.0 {
                values[lo]
            } else {
                values[lo] * (1.0 - frac) + values[lo + 1] * frac
            }
        })
        .collect()
}

/// Gradient-weighted class activation importance at the final convolution
/// layer: channel weights are the global average of the target-class score
/// gradient, the map is the ReLU of the weighted channel sum, and frame
/// importance is the spatial mean of the map, interpolated to T frames.
pub fn importance_gradcam(
    model: &mut ComputeGraph,
    model_id: &str,
    clip: &VideoClip,
    clip_id: &str,
    y: Label,
) -> Result<ImportanceProfile> {
    let layer = model
        .last_conv_layer()
        .ok_or_else(|| Error::Unsupported("model has no convolution layer".into()))?;
    y.validate(model.num_classes())?;
    let logits = model.forward(clip)?;
    let mut seed = Tensor::zeros(logits.shape());
    seed.data_mut()[y.0] = 1.0;
    let (grad, _) = model.backward(&seed, false, layer + 1)?;
    let acts = model.activation(layer + 1).expect("cached forward").clone();
    let s = acts.shape();
    let (t_n, h_n, w_n, c_n) = (s[0], s[1], s[2], s[3]);
    let volume = (t_n * h_n * w_n) as f64;
    let mut channel_weights = vec![0.0; c_n];
    for (i, g) in grad.data().iter().enumerate() {
        channel_weights[i % c_n] += g;
    }
    for w in &mut channel_weights {
        *w /= volume;
    }
    let mut per_frame = vec![0.0; t_n];
    for ft in 0..t_n {
        let mut acc = 0.0;
        for hh in 0..h_n {
            for ww in 0..w_n {
                let mut v = 0.0;
                for ch in 0..c_n {
                    v += channel_weights[ch] * acts.data()[acts.idx4(ft, hh, ww, ch)];
                }
                acc += v.max(0.0);
            }
        }
        per_frame[ft] = acc / (h_n * w_n) as f64;
    }
    let values = interpolate_time(&per_frame, clip.tensor().frames());
    Ok(ImportanceProfile {
        model_id: model_id.to_string(),
        clip_id: clip_id.to_string(),
        method: ImportanceMethod::GradCam,
        values,
    })
}

pub fn importance(
    method: ImportanceMethod,
    model: &mut ComputeGraph,
    model_id: &str,
    clip: &VideoClip,
    clip_id: &str,
    y: Label,
) -> Result<ImportanceProfile> {
    match method {
        ImportanceMethod::ZeroPad => importance_zero_pad(model, model_id, clip, clip_id, y),
        ImportanceMethod::MeanPad => importance_mean_pad(model, model_id, clip, clip_id, y),
        ImportanceMethod::GradCam => importance_gradcam(model, model_id, clip, clip_id, y),
    }
}

/// Ranks in descending importance: rank 1 is the most important frame,
/// ties resolve to the lower frame index.
pub fn importance_ranks(values: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| {
        values[b]
            .total_cmp(&values[a])
            .then_with(|| a.cmp(&b))
    });
    let mut ranks = vec![0usize; values.len()];
    for (pos, &idx) in order.iter().enumerate() {
        ranks[idx] = pos + 1;
    }
    ranks
}

/// Spearman's rank correlation on raw importance values.
pub fn spearman_from_values(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape {
            expected: format!("{} frames", a.len()),
            got: format!("{} frames", b.len()),
        });
    }
    let t = a.len();
    if t < 2 {
        return Err(Error::Spec("rank correlation needs at least 2 frames".into()));
    }
    let ra = importance_ranks(a);
    let rb = importance_ranks(b);
    let s: f64 = ra
        .iter()
        .zip(&rb)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    let tf = (t * (t * t - 1)) as f64;
    Ok((tf - 6.0 * s) / tf)
}

/// Spearman's rank correlation between two profiles of the same clip.
pub fn spearman_rho(a: &ImportanceProfile, b: &ImportanceProfile) -> Result<f64> {
    if a.clip_id != b.clip_id {
        return Err(Error::Spec(format!(
            "profiles describe different clips: {:?} vs {:?}",
            a.clip_id, b.clip_id
        )));
    }
    spearman_from_values(&a.values, &b.values)
}

/// Mean pairwise rank correlation of frame-importance profiles over an
/// eval set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorrelationMatrix {
    pub model_ids: Vec<String>,
    pub method: ImportanceMethod,
    /// Row-major n×n; symmetric with a unit diagonal.
    pub matrix: Vec<Vec<f64>>,
    pub clip_count: usize,
}

impl CorrelationMatrix {
    pub fn entry(&self, a: &str, b: &str) -> Option<f64> {
        let ia = self.model_ids.iter().position(|m| m == a)?;
        let ib = self.model_ids.iter().position(|m| m == b)?;
        Some(self.matrix[ia][ib])
    }
}

/// Computes the model×model correlation matrix of frame-importance
/// profiles, averaged over the clips every model classifies correctly.
pub fn model_correlation(
    models: &mut [(String, ComputeGraph)],
    clips: &[LabeledClip],
    method: ImportanceMethod,
) -> Result<CorrelationMatrix> {
    if models.is_empty() {
        return Err(Error::Protocol("no models given".into()));
    }
    let eligible: Vec<&LabeledClip> = {
        let mut keep = Vec::new();
        for clip in clips {
            let mut all_correct = true;
            for (_, model) in models.iter_mut() {
                let logits = model.forward(&clip.clip)?;
                if argmax_label(&logits) != clip.label {
                    all_correct = false;
                    break;
                }
            }
            if all_correct {
                keep.push(clip);
            }
        }
        keep
    };
    if eligible.is_empty() {
        return Err(Error::Protocol(
            "no clip is correctly classified by every model".into(),
        ));
    }
    // profiles[clip][model], clips evaluated in parallel
    let profiles: Vec<Vec<ImportanceProfile>> = eligible
        .par_iter()
        .map(|clip| {
            let mut row = Vec::with_capacity(models.len());
            for (id, model) in models.iter() {
                let mut local = model.clone();
                row.push(importance(method, &mut local, id, &clip.clip, &clip.id, clip.label)?);
            }
            Ok(row)
        })
        .collect::<Result<_>>()?;
    let n = models.len();
    let mut matrix = vec![vec![1.0; n]; n];
    for ia in 0..n {
        for ib in ia + 1..n {
            let mut acc = 0.0;
            for row in &profiles {
                acc += spearman_rho(&row[ia], &row[ib])?;
            }
            let mean = acc / profiles.len() as f64;
            matrix[ia][ib] = mean;
            matrix[ib][ia] = mean;
        }
    }
    Ok(CorrelationMatrix {
        model_ids: models.iter().map(|(id, _)| id.clone()).collect(),
        method,
        matrix,
        clip_count: profiles.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{Activation, Affine, AvgPool, Conv3d, Layer, Padding};
    use crate::tensor::VideoClip;

    fn profile(values: Vec<f64>) -> ImportanceProfile {
        ImportanceProfile {
            model_id: "m".into(),
            clip_id: "c".into(),
            method: ImportanceMethod::ZeroPad,
            values,
        }
    }

    #[test]
    fn identical_profiles_correlate_at_one() {
        let p = profile(vec![0.3, 0.1, 0.9, 0.5]);
        assert_eq!(spearman_rho(&p, &p).unwrap(), 1.0);
    }

    #[test]
    fn reversed_profiles_correlate_at_minus_one() {
        let a = profile(vec![4.0, 3.0, 2.0, 1.0]);
        let b = profile(vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(spearman_rho(&a, &b).unwrap(), -1.0);
    }

    #[test]
    fn hand_case_gives_half() {
        // ranks (1,3,2) vs (1,2,3): sum d^2 = 2, rho = 1 - 12/24 = 0.5
        let a = profile(vec![3.0, 1.0, 2.0]);
        let b = profile(vec![3.0, 2.0, 1.0]);
        assert_eq!(importance_ranks(&a.values), vec![1, 3, 2]);
        assert_eq!(importance_ranks(&b.values), vec![1, 2, 3]);
        assert!((spearman_rho(&a, &b).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn ties_break_toward_lower_frame_index() {
        let ranks = importance_ranks(&[0.5, 0.7, 0.5]);
        assert_eq!(ranks, vec![2, 1, 3]);
    }

    #[test]
    fn length_mismatch_is_an_input_error() {
        let a = profile(vec![1.0, 2.0]);
        let b = profile(vec![1.0, 2.0, 3.0]);
        assert!(spearman_rho(&a, &b).is_err());
    }

    fn toy_temporal_model(t: usize) -> ComputeGraph {
        // one conv over the full clip keeps per-frame structure visible
        let layers = vec![
            Layer::Conv3d(Conv3d {
                weight: Tensor::filled(&[1, 1, 1, 1, 1], 1.0),
                bias: Tensor::zeros(&[1]),
                padding: Padding::Same,
            }),
            Layer::Activation(Activation::Tanh),
            Layer::Flatten,
            Layer::Affine(Affine {
                weight: Tensor::from_vec(
                    &[2, t * 4],
                    (0..2 * t * 4).map(|i| ((i % 7) as f64 - 3.0) * 0.2).collect(),
                )
                .unwrap(),
                bias: Tensor::zeros(&[2]),
            }),
        ];
        ComputeGraph::new(layers, &[t, 2, 2, 1]).unwrap()
    }

    fn ramp_clip(t: usize) -> VideoClip {
        let mut x = Tensor::zeros(&[t, 2, 2, 1]);
        for (i, v) in x.data_mut().iter_mut().enumerate() {
            *v = ((i * 31 % 17) as f64) / 17.0;
        }
        VideoClip::new(x).unwrap()
    }

    #[test]
    fn zero_pad_of_an_already_zero_frame_is_exactly_zero() {
        let mut model = toy_temporal_model(4);
        let mut x = Tensor::zeros(&[4, 2, 2, 1]);
        for (i, v) in x.data_mut().iter_mut().enumerate() {
            *v = ((i % 5) as f64) / 5.0;
        }
        x.frame_mut(2).fill(0.0);
        let clip = VideoClip::new(x).unwrap();
        let p = importance_zero_pad(&mut model, "m", &clip, "c", Label(0)).unwrap();
        assert_eq!(p.values[2], 0.0);
        assert_eq!(p.values.len(), 4);
    }

    #[test]
    fn zero_pad_matches_brute_force_double_forward() {
        let mut model = toy_temporal_model(3);
        let clip = ramp_clip(3);
        let p = importance_zero_pad(&mut model, "m", &clip, "c", Label(1)).unwrap();
        for i in 0..3 {
            let mut masked = clip.tensor().clone();
            masked.frame_mut(i).fill(0.0);
            let expected = model.loss_value(&masked, Label(1)).unwrap()
                - model.loss_value(clip.tensor(), Label(1)).unwrap();
            assert!((p.values[i] - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn mean_pad_of_a_static_clip_is_zero_everywhere() {
        let mut model = toy_temporal_model(4);
        let clip = VideoClip::new(Tensor::filled(&[4, 2, 2, 1], 0.25)).unwrap();
        let p = importance_mean_pad(&mut model, "m", &clip, "c", Label(0)).unwrap();
        assert!(p.values.iter().all(|&v| v == 0.0), "{:?}", p.values);
    }

    #[test]
    fn mean_pad_is_zero_when_frame_equals_neighbor_mean() {
        let mut model = toy_temporal_model(3);
        let mut x = Tensor::zeros(&[3, 2, 2, 1]);
        // dyadic values so (f0 + f2) / 2 == f1 exactly
        x.frame_mut(0).fill(0.25);
        x.frame_mut(1).fill(0.375);
        x.frame_mut(2).fill(0.5);
        let clip = VideoClip::new(x).unwrap();
        let p = importance_mean_pad(&mut model, "m", &clip, "c", Label(0)).unwrap();
        assert_eq!(p.values[1], 0.0);
    }

    #[test]
    fn gradcam_needs_a_convolution_layer() {
        let layers = vec![
            Layer::Flatten,
            Layer::Affine(Affine {
                weight: Tensor::filled(&[2, 16], 0.1),
                bias: Tensor::zeros(&[2]),
            }),
        ];
        let mut model = ComputeGraph::new(layers, &[4, 2, 2, 1]).unwrap();
        let clip = ramp_clip(4);
        assert!(matches!(
            importance_gradcam(&mut model, "m", &clip, "c", Label(0)),
            Err(Error::Unsupported(_))
        ));
    }

    #[test]
    fn gradcam_is_zero_when_the_head_ignores_the_conv_features() {
        // zero affine weights -> zero gradient at the conv output
        let t = 4;
        let layers = vec![
            Layer::Conv3d(Conv3d {
                weight: Tensor::filled(&[1, 1, 1, 1, 1], 1.0),
                bias: Tensor::zeros(&[1]),
                padding: Padding::Same,
            }),
            Layer::Flatten,
            Layer::Affine(Affine {
                weight: Tensor::zeros(&[2, t * 4]),
                bias: Tensor::zeros(&[2]),
            }),
        ];
        let mut model = ComputeGraph::new(layers, &[t, 2, 2, 1]).unwrap();
        let clip = ramp_clip(t);
        let p = importance_gradcam(&mut model, "m", &clip, "c", Label(0)).unwrap();
        assert!(p.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradcam_is_uniform_for_temporally_uniform_activations() {
        let t = 4;
        let layers = vec![
            Layer::Conv3d(Conv3d {
                weight: Tensor::filled(&[1, 1, 1, 1, 1], 0.8),
                bias: Tensor::zeros(&[1]),
                padding: Padding::Same,
            }),
            Layer::AvgPool(AvgPool { window: [1, 2, 2] }),
            Layer::Flatten,
            Layer::Affine(Affine {
                weight: Tensor::filled(&[2, t], 0.3),
                bias: Tensor::zeros(&[2]),
            }),
        ];
        let mut model = ComputeGraph::new(layers, &[t, 2, 2, 1]).unwrap();
        // static clip -> temporally uniform activations and gradients
        let clip = VideoClip::new(Tensor::filled(&[t, 2, 2, 1], 0.6)).unwrap();
        let p = importance_gradcam(&mut model, "m", &clip, "c", Label(1)).unwrap();
        for v in &p.values {
            assert_eq!(v.to_bits(), p.values[0].to_bits());
        }
    }

    #[test]
    fn gradcam_matches_hand_rolled_single_channel_computation() {
        let t = 3;
        let layers = vec![
            Layer::Conv3d(Conv3d {
                weight: Tensor::from_vec(&[1, 1, 1, 1, 1], vec![0.9]).unwrap(),
                bias: Tensor::from_vec(&[1], vec![0.1]).unwrap(),
                padding: Padding::Same,
            }),
            Layer::Flatten,
            Layer::Affine(Affine {
                weight: Tensor::from_vec(
                    &[2, t * 4],
                    (0..2 * t * 4).map(|i| ((i % 5) as f64 - 2.0) * 0.3).collect(),
                )
                .unwrap(),
                bias: Tensor::zeros(&[2]),
            }),
        ];
        let mut model = ComputeGraph::new(layers.clone(), &[t, 2, 2, 1]).unwrap();
        let clip = ramp_clip(t);
        let p = importance_gradcam(&mut model, "m", &clip, "c", Label(1)).unwrap();

        // straight-line recomputation: acts = 0.9 x + 0.1, grad = affine row 1
        let affine_w = match &layers[2] {
            Layer::Affine(a) => a.weight.clone(),
            _ => unreachable!(),
        };
        let acts: Vec<f64> = clip.tensor().data().iter().map(|v| 0.9 * v + 0.1).collect();
        let grads: Vec<f64> = (0..t * 4).map(|i| affine_w.data()[t * 4 + i]).collect();
        let alpha: f64 = grads.iter().sum::<f64>() / (t * 4) as f64;
        for i in 0..t {
            let frame = &acts[i * 4..(i + 1) * 4];
            let expected: f64 =
                frame.iter().map(|&a| (alpha * a).max(0.0)).sum::<f64>() / 4.0;
            assert!((p.values[i] - expected).abs() < 1e-12, "frame {i}");
        }
    }

    #[test]
    fn interpolation_preserves_length_and_endpoints() {
        let v = vec![1.0, 5.0, 2.0];
        let out = interpolate_time(&v, 5);
        assert_eq!(out.len(), 5);
        assert_eq!(out[0], 1.0);
        assert_eq!(out[4], 2.0);
        assert_eq!(out[2], 5.0); // midpoint hits the middle sample exactly
        let constant = interpolate_time(&[0.7], 4);
        assert_eq!(constant, vec![0.7; 4]);
    }
}
