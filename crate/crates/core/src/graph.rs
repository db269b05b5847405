//! Layered reverse-mode differentiable engine for small video classifiers.
//!
//! A [`ComputeGraph`] is an ordered chain of layers (3-D convolution,
//! pointwise nonlinearity, average pooling, flatten, affine). Forward caches
//! every boundary activation; backward walks the chain in reverse and
//! produces exact input and parameter gradients of the classification loss.
//!
//! Pooling reduces each window in a canonical sorted order, so reductions
//! that collapse the full temporal axis are invariant under frame
//! permutations bit-for-bit. That property is load-bearing: a model whose
//! first layer collapses time is then exactly equivariant to temporal
//! shifts of its input.

use crate::error::{Error, Result};
use crate::loss;
use crate::tensor::{sorted_sum, Label, Tensor, VideoClip};

/// Pointwise nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Relu,
}

/// Zero padding mode for 3-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Zero-pad so the output keeps the input's T×H×W extent. Kernel
    /// extents must be odd.
    Same,
    /// No padding; output shrinks by the kernel extent minus one.
    Valid,
}

/// 3-D convolution over T×H×W×C input, stride 1.
///
/// Weight layout is `[c_out, k_t, k_h, k_w, c_in]`, bias is `[c_out]`.
#[derive(Debug, Clone)]
pub struct Conv3d {
    pub weight: Tensor,
    pub bias: Tensor,
    pub padding: Padding,
}

/// Average pooling with non-overlapping windows (stride equals window).
#[derive(Debug, Clone)]
pub struct AvgPool {
    pub window: [usize; 3],
}

/// Fully connected layer; weight layout `[out, in]`.
#[derive(Debug, Clone)]
pub struct Affine {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone)]
pub enum Layer {
    Conv3d(Conv3d),
    Activation(Activation),
    AvgPool(AvgPool),
    Flatten,
    Affine(Affine),
}

impl Layer {
    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match self {
            Layer::Conv3d(conv) => {
                if input.len() != 4 {
                    return Err(Error::Spec(format!(
                        "conv3d expects rank-4 input, got {input:?}"
                    )));
                }
                let ws = conv.weight.shape();
                if ws.len() != 5 {
                    return Err(Error::Spec(format!(
                        "conv3d weight must be rank 5, got {ws:?}"
                    )));
                }
                let (co, kt, kh, kw, ci) = (ws[0], ws[1], ws[2], ws[3], ws[4]);
                if ci != input[3] {
                    return Err(Error::Spec(format!(
                        "conv3d in-channels {ci} do not match input {}",
                        input[3]
                    )));
                }
                if conv.bias.shape() != [co] {
                    return Err(Error::Spec("conv3d bias length must equal c_out".into()));
                }
                match conv.padding {
                    Padding::Same => {
                        if kt % 2 == 0 || kh % 2 == 0 || kw % 2 == 0 {
                            return Err(Error::Spec(
                                "same-padded conv3d needs odd kernel extents".into(),
                            ));
                        }
                        Ok(vec![input[0], input[1], input[2], co])
                    }
                    Padding::Valid => {
                        if kt > input[0] || kh > input[1] || kw > input[2] {
                            return Err(Error::Spec(format!(
                                "valid conv3d kernel {:?} exceeds input {:?}",
                                [kt, kh, kw],
                                &input[..3]
                            )));
                        }
                        Ok(vec![input[0] - kt + 1, input[1] - kh + 1, input[2] - kw + 1, co])
                    }
                }
            }
            Layer::Activation(_) => Ok(input.to_vec()),
            Layer::AvgPool(pool) => {
                if input.len() != 4 {
                    return Err(Error::Spec(format!(
                        "avg-pool expects rank-4 input, got {input:?}"
                    )));
                }
                let w = pool.window;
                if w.iter().any(|&d| d == 0) {
                    return Err(Error::Spec("pool window extents must be positive".into()));
                }
                for axis in 0..3 {
                    if input[axis] % w[axis] != 0 {
                        return Err(Error::Spec(format!(
                            "pool window {:?} does not tile input {:?}",
                            w, input
                        )));
                    }
                }
                Ok(vec![input[0] / w[0], input[1] / w[1], input[2] / w[2], input[3]])
            }
            Layer::Flatten => Ok(vec![input.iter().product()]),
            Layer::Affine(aff) => {
                let ws = aff.weight.shape();
                if ws.len() != 2 {
                    return Err(Error::Spec("affine weight must be rank 2".into()));
                }
                if input.len() != 1 || input[0] != ws[1] {
                    return Err(Error::Spec(format!(
                        "affine expects flat input of {} elements, got {input:?}",
                        ws[1]
                    )));
                }
                if aff.bias.shape() != [ws[0]] {
                    return Err(Error::Spec("affine bias length must equal out dim".into()));
                }
                Ok(vec![ws[0]])
            }
        }
    }
}

/// Gradients for one parameterized layer.
#[derive(Debug, Clone)]
pub struct LayerGrads {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Which parameter tensor of a layer a coordinate refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
}

/// Chain of layers with a parameter store and the forward activation cache.
///
/// One instance is used by one thread at a time; clone for data-parallel
/// evaluation.
#[derive(Debug, Clone)]
pub struct ComputeGraph {
    layers: Vec<Layer>,
    boundaries: Vec<Vec<usize>>,
    cache: Vec<Tensor>,
}

impl ComputeGraph {
    /// Builds the graph, type-checking the layer chain against `input_shape`
    /// (T×H×W×C).
    pub fn new(layers: Vec<Layer>, input_shape: &[usize]) -> Result<Self> {
        if input_shape.len() != 4 {
            return Err(Error::Spec(format!(
                "graph input must be rank 4, got {input_shape:?}"
            )));
        }
        let mut boundaries = vec![input_shape.to_vec()];
        for layer in &layers {
            let next = layer.output_shape(boundaries.last().unwrap())?;
            boundaries.push(next);
        }
        let out = boundaries.last().unwrap();
        if out.len() != 1 || out[0] < 2 {
            return Err(Error::Spec(format!(
                "graph must end in a logit vector of at least 2 classes, got {out:?}"
            )));
        }
        Ok(ComputeGraph { layers, boundaries, cache: Vec::new() })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.boundaries[0]
    }

    pub fn num_classes(&self) -> usize {
        self.boundaries.last().unwrap()[0]
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Shape of the activation at boundary `i` (0 = input, layers+1 total).
    pub fn boundary_shape(&self, i: usize) -> &[usize] {
        &self.boundaries[i]
    }

    /// Cached activation at boundary `i` from the most recent forward pass.
    pub fn activation(&self, i: usize) -> Option<&Tensor> {
        self.cache.get(i)
    }

    /// Index of the last convolution layer, if any.
    pub fn last_conv_layer(&self) -> Option<usize> {
        self.layers
            .iter()
            .rposition(|l| matches!(l, Layer::Conv3d(_)))
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                Layer::Conv3d(c) => {
                    out.push((format!("layer{i}.weight"), &c.weight));
                    out.push((format!("layer{i}.bias"), &c.bias));
                }
                Layer::Affine(a) => {
                    out.push((format!("layer{i}.weight"), &a.weight));
                    out.push((format!("layer{i}.bias"), &a.bias));
                }
                _ => {}
            }
        }
        out
    }

    pub fn param(&self, layer: usize, kind: ParamKind) -> Option<&Tensor> {
        match self.layers.get(layer)? {
            Layer::Conv3d(c) => Some(match kind {
                ParamKind::Weight => &c.weight,
                ParamKind::Bias => &c.bias,
            }),
            Layer::Affine(a) => Some(match kind {
                ParamKind::Weight => &a.weight,
                ParamKind::Bias => &a.bias,
            }),
            _ => None,
        }
    }

    pub fn param_mut(&mut self, layer: usize, kind: ParamKind) -> Option<&mut Tensor> {
        match self.layers.get_mut(layer)? {
            Layer::Conv3d(c) => Some(match kind {
                ParamKind::Weight => &mut c.weight,
                ParamKind::Bias => &mut c.bias,
            }),
            Layer::Affine(a) => Some(match kind {
                ParamKind::Weight => &mut a.weight,
                ParamKind::Bias => &mut a.bias,
            }),
            _ => None,
        }
    }

    /// Layer indices that carry parameters.
    pub fn param_layers(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l, Layer::Conv3d(_) | Layer::Affine(_)))
            .map(|(i, _)| i)
            .collect()
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.shape() != self.input_shape() {
            return Err(Error::Shape {
                expected: format!("{:?}", self.input_shape()),
                got: format!("{:?}", x.shape()),
            });
        }
        Ok(())
    }

    /// Forward pass on a validated clip; returns the K logits and caches
    /// activations for a subsequent backward pass.
    pub fn forward(&mut self, clip: &VideoClip) -> Result<Tensor> {
        self.forward_tensor(clip.tensor())
    }

    /// Forward pass on a raw tensor (shape-checked only). The attack loop
    /// and the finite-difference oracle enter here, where intermediate
    /// points may sit slightly outside the [0,1] pixel range.
    pub fn forward_tensor(&mut self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let mut cache = Vec::with_capacity(self.layers.len() + 1);
        cache.push(x.clone());
        for (i, layer) in self.layers.iter().enumerate() {
            let out = layer_forward(layer, cache.last().unwrap());
            out.check_finite(&format!("forward activation after layer {i}"))?;
            cache.push(out);
        }
        self.cache = cache;
        Ok(self.cache.last().unwrap().clone())
    }

    /// Reverse pass from a gradient seeded at the logits.
    ///
    /// Propagates down to `stop_boundary` (0 = the input) and returns the
    /// gradient at that boundary, plus per-layer parameter gradients when
    /// `with_params` is set. Requires a cached forward pass.
    pub fn backward(
        &self,
        logit_grad: &Tensor,
        with_params: bool,
        stop_boundary: usize,
    ) -> Result<(Tensor, Vec<Option<LayerGrads>>)> {
        if self.cache.len() != self.layers.len() + 1 {
            return Err(Error::Spec("backward called without a cached forward pass".into()));
        }
        let mut grad = logit_grad.clone();
        let mut param_grads: Vec<Option<LayerGrads>> = vec![None; self.layers.len()];
        for i in (stop_boundary..self.layers.len()).rev() {
            let input = &self.cache[i];
            let output = &self.cache[i + 1];
            let (gin, gparams) =
                layer_backward(&self.layers[i], input, output, &grad, with_params);
            param_grads[i] = gparams;
            grad = gin;
        }
        Ok((grad, param_grads))
    }

    /// Exact gradient of the cross-entropy loss with respect to every input
    /// element. Does not mutate the input.
    pub fn input_gradient(&mut self, x: &Tensor, y: Label) -> Result<Tensor> {
        y.validate(self.num_classes())?;
        let logits = self.forward_tensor(x)?;
        let seed = loss::cross_entropy_grad(&logits, y)?;
        let (grad, _) = self.backward(&seed, false, 0)?;
        grad.check_finite("input gradient")?;
        Ok(grad)
    }

    /// Mean-over-batch gradient of the loss with respect to every parameter.
    pub fn param_gradient(&mut self, batch: &[(Tensor, Label)]) -> Result<Vec<Option<LayerGrads>>> {
        if batch.is_empty() {
            return Err(Error::Spec("param_gradient needs a nonempty batch".into()));
        }
        let mut acc: Vec<Option<LayerGrads>> = vec![None; self.layers.len()];
        for (x, y) in batch {
            y.validate(self.num_classes())?;
            let logits = self.forward_tensor(x)?;
            let seed = loss::cross_entropy_grad(&logits, *y)?;
            let (_, grads) = self.backward(&seed, true, 0)?;
            for (slot, g) in acc.iter_mut().zip(grads) {
                match (slot.as_mut(), g) {
                    (None, Some(g)) => *slot = Some(g),
                    (Some(a), Some(g)) => {
                        a.weight.add_scaled(&g.weight, 1.0);
                        a.bias.add_scaled(&g.bias, 1.0);
                    }
                    _ => {}
                }
            }
        }
        let scale = 1.0 / batch.len() as f64;
        for slot in acc.iter_mut().flatten() {
            slot.weight.scale(scale);
            slot.bias.scale(scale);
            slot.weight.check_finite("parameter gradient")?;
            slot.bias.check_finite("parameter gradient")?;
        }
        Ok(acc)
    }

    /// Loss of the graph's prediction on `x` against label `y`.
    pub fn loss_value(&mut self, x: &Tensor, y: Label) -> Result<f64> {
        let logits = self.forward_tensor(x)?;
        loss::cross_entropy(&logits, y)
    }
}

fn layer_forward(layer: &Layer, input: &Tensor) -> Tensor {
    match layer {
        Layer::Conv3d(conv) => conv_forward(conv, input),
        Layer::Activation(act) => match act {
            Activation::Tanh => input.map(f64::tanh),
            Activation::Relu => input.map(|v| v.max(0.0)),
        },
        Layer::AvgPool(pool) => pool_forward(pool, input),
        Layer::Flatten => {
            Tensor::from_vec(&[input.len()], input.data().to_vec()).expect("flatten")
        }
        Layer::Affine(aff) => affine_forward(aff, input),
    }
}

fn layer_backward(
    layer: &Layer,
    input: &Tensor,
    output: &Tensor,
    gout: &Tensor,
    with_params: bool,
) -> (Tensor, Option<LayerGrads>) {
    match layer {
        Layer::Conv3d(conv) => conv_backward(conv, input, gout, with_params),
        Layer::Activation(act) => {
            let gin = match act {
                Activation::Tanh => {
                    let mut g = gout.clone();
                    for (gv, &yv) in g.data_mut().iter_mut().zip(output.data()) {
                        *gv *= 1.0 - yv * yv;
                    }
                    g
                }
                Activation::Relu => {
                    let mut g = gout.clone();
                    for (gv, &xv) in g.data_mut().iter_mut().zip(input.data()) {
                        if xv <= 0.0 {
                            *gv = 0.0;
                        }
                    }
                    g
                }
            };
            (gin, None)
        }
        Layer::AvgPool(pool) => (pool_backward(pool, input.shape(), gout), None),
        Layer::Flatten => (
            Tensor::from_vec(input.shape(), gout.data().to_vec()).expect("flatten grad"),
            None,
        ),
        Layer::Affine(aff) => affine_backward(aff, input, gout, with_params),
    }
}

fn conv_out_shape(conv: &Conv3d, ins: &[usize]) -> ([usize; 3], [usize; 4]) {
    let ws = conv.weight.shape();
    let (co, kt, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
    match conv.padding {
        Padding::Same => {
            let pad = [(kt - 1) / 2, (kh - 1) / 2, (kw - 1) / 2];
            (pad, [ins[0], ins[1], ins[2], co])
        }
        Padding::Valid => {
            ([0, 0, 0], [ins[0] - kt + 1, ins[1] - kh + 1, ins[2] - kw + 1, co])
        }
    }
}

fn pad_input(input: &Tensor, pad: [usize; 3]) -> Tensor {
    if pad == [0, 0, 0] {
        return input.clone();
    }
    let s = input.shape();
    let (t, h, w, c) = (s[0], s[1], s[2], s[3]);
    let mut padded = Tensor::zeros(&[t + 2 * pad[0], h + 2 * pad[1], w + 2 * pad[2], c]);
    let pw = padded.shape()[2];
    let row = w * c;
    for it in 0..t {
        for ih in 0..h {
            let src = ((it * h + ih) * w) * c;
            let dst = (((it + pad[0]) * (h + 2 * pad[1]) + ih + pad[1]) * pw + pad[2]) * c;
            padded.data_mut()[dst..dst + row].copy_from_slice(&input.data()[src..src + row]);
        }
    }
    padded
}

fn conv_forward(conv: &Conv3d, input: &Tensor) -> Tensor {
    let ws = conv.weight.shape();
    let (co, kt, kh, kw, ci) = (ws[0], ws[1], ws[2], ws[3], ws[4]);
    let (pad, out_shape) = conv_out_shape(conv, input.shape());
    let padded = pad_input(input, pad);
    let ps = padded.shape();
    let (ph, pw) = (ps[1], ps[2]);
    let mut out = Tensor::zeros(&out_shape);
    let (ot_n, oh_n, ow_n) = (out_shape[0], out_shape[1], out_shape[2]);
    let wrow = kw * ci; // contiguous tail of the weight for fixed (co, kt, kh)
    let pdata = padded.data();
    let wdata = conv.weight.data();
    let odata = out.data_mut();
    for ot in 0..ot_n {
        for oh in 0..oh_n {
            for ow in 0..ow_n {
                let obase = ((ot * oh_n + oh) * ow_n + ow) * co;
                for c in 0..co {
                    let mut acc = conv.bias.data()[c];
                    let wbase_c = c * kt * kh * wrow;
                    for dt in 0..kt {
                        for dh in 0..kh {
                            let wb = wbase_c + (dt * kh + dh) * wrow;
                            let pb = (((ot + dt) * ph + oh + dh) * pw + ow) * ci;
                            let wslice = &wdata[wb..wb + wrow];
                            let pslice = &pdata[pb..pb + wrow];
                            for k in 0..wrow {
                                acc += wslice[k] * pslice[k];
                            }
                        }
                    }
                    odata[obase + c] = acc;
                }
            }
        }
    }
    out
}

fn conv_backward(
    conv: &Conv3d,
    input: &Tensor,
    gout: &Tensor,
    with_params: bool,
) -> (Tensor, Option<LayerGrads>) {
    let ws = conv.weight.shape();
    let (co, kt, kh, kw, ci) = (ws[0], ws[1], ws[2], ws[3], ws[4]);
    let (pad, out_shape) = conv_out_shape(conv, input.shape());
    let padded = pad_input(input, pad);
    let ps = padded.shape().to_vec();
    let (ph, pw) = (ps[1], ps[2]);
    let mut gpad = Tensor::zeros(&ps);
    let mut gw = Tensor::zeros(ws);
    let mut gb = Tensor::zeros(&[co]);
    let (ot_n, oh_n, ow_n) = (out_shape[0], out_shape[1], out_shape[2]);
    let wrow = kw * ci;
    let wdata = conv.weight.data();
    let pdata = padded.data();
    for ot in 0..ot_n {
        for oh in 0..oh_n {
            for ow in 0..ow_n {
                let obase = ((ot * oh_n + oh) * ow_n + ow) * co;
                for c in 0..co {
                    let g = gout.data()[obase + c];
                    if with_params {
                        gb.data_mut()[c] += g;
                    }
                    let wbase_c = c * kt * kh * wrow;
                    for dt in 0..kt {
                        for dh in 0..kh {
                            let wb = wbase_c + (dt * kh + dh) * wrow;
                            let pb = (((ot + dt) * ph + oh + dh) * pw + ow) * ci;
                            let wslice = &wdata[wb..wb + wrow];
                            let gp = &mut gpad.data_mut()[pb..pb + wrow];
                            for k in 0..wrow {
                                gp[k] += g * wslice[k];
                            }
                            if with_params {
                                let pslice = &pdata[pb..pb + wrow];
                                let gwslice = &mut gw.data_mut()[wb..wb + wrow];
                                for k in 0..wrow {
                                    gwslice[k] += g * pslice[k];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    // crop padding back off
    let gin = if pad == [0, 0, 0] {
        gpad
    } else {
        let s = input.shape();
        let (t, h, w, c) = (s[0], s[1], s[2], s[3]);
        let mut gin = Tensor::zeros(s);
        let row = w * c;
        for it in 0..t {
            for ih in 0..h {
                let dst = ((it * h + ih) * w) * c;
                let src = (((it + pad[0]) * (h + 2 * pad[1]) + ih + pad[1]) * pw + pad[2]) * c;
                gin.data_mut()[dst..dst + row].copy_from_slice(&gpad.data()[src..src + row]);
            }
        }
        gin
    };
    let grads = with_params.then(|| LayerGrads { weight: gw, bias: gb });
    (gin, grads)
}

fn pool_forward(pool: &AvgPool, input: &Tensor) -> Tensor {
    let s = input.shape();
    let (t, h, w, c) = (s[0], s[1], s[2], s[3]);
    let [wt, wh, ww] = pool.window;
    let (ot_n, oh_n, ow_n) = (t / wt, h / wh, w / ww);
    let count = (wt * wh * ww) as f64;
    let mut out = Tensor::zeros(&[ot_n, oh_n, ow_n, c]);
    let mut window = vec![0.0; wt * wh * ww];
    for ot in 0..ot_n {
        for oh in 0..oh_n {
            for ow in 0..ow_n {
                for ch in 0..c {
                    let mut n = 0;
                    for dt in 0..wt {
                        for dh in 0..wh {
                            for dw in 0..ww {
                                window[n] = input.data()
                                    [input.idx4(ot * wt + dt, oh * wh + dh, ow * ww + dw, ch)];
                                n += 1;
                            }
                        }
                    }
                    let idx = out.idx4(ot, oh, ow, ch);
                    out.data_mut()[idx] = sorted_sum(&mut window) / count;
                }
            }
        }
    }
    out
}

fn pool_backward(pool: &AvgPool, in_shape: &[usize], gout: &Tensor) -> Tensor {
    let (t, h, w, c) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
    let [wt, wh, ww] = pool.window;
    let (ot_n, oh_n, ow_n) = (t / wt, h / wh, w / ww);
    let inv = 1.0 / (wt * wh * ww) as f64;
    let mut gin = Tensor::zeros(in_shape);
    for ot in 0..ot_n {
        for oh in 0..oh_n {
            for ow in 0..ow_n {
                for ch in 0..c {
                    let g = gout.data()[gout.idx4(ot, oh, ow, ch)] * inv;
                    for dt in 0..wt {
                        for dh in 0..wh {
                            for dw in 0..ww {
                                let idx =
                                    gin.idx4(ot * wt + dt, oh * wh + dh, ow * ww + dw, ch);
                                gin.data_mut()[idx] += g;
                            }
                        }
                    }
                }
            }
        }
    }
    gin
}

fn affine_forward(aff: &Affine, input: &Tensor) -> Tensor {
    let (out_n, in_n) = (aff.weight.shape()[0], aff.weight.shape()[1]);
    let mut out = Tensor::zeros(&[out_n]);
    for o in 0..out_n {
        let row = &aff.weight.data()[o * in_n..(o + 1) * in_n];
        let mut acc = aff.bias.data()[o];
        for (wv, xv) in row.iter().zip(input.data()) {
            acc += wv * xv;
        }
        out.data_mut()[o] = acc;
    }
    out
}

fn affine_backward(
    aff: &Affine,
    input: &Tensor,
    gout: &Tensor,
    with_params: bool,
) -> (Tensor, Option<LayerGrads>) {
    let (out_n, in_n) = (aff.weight.shape()[0], aff.weight.shape()[1]);
    let mut gin = Tensor::zeros(&[in_n]);
    for o in 0..out_n {
        let g = gout.data()[o];
        let row = &aff.weight.data()[o * in_n..(o + 1) * in_n];
        for (gi, wv) in gin.data_mut().iter_mut().zip(row) {
            *gi += g * wv;
        }
    }
    let grads = with_params.then(|| {
        let mut gw = Tensor::zeros(aff.weight.shape());
        let mut gb = Tensor::zeros(&[out_n]);
        for o in 0..out_n {
            let g = gout.data()[o];
            gb.data_mut()[o] = g;
            let row = &mut gw.data_mut()[o * in_n..(o + 1) * in_n];
            for (gw_v, xv) in row.iter_mut().zip(input.data()) {
                *gw_v = g * xv;
            }
        }
        LayerGrads { weight: gw, bias: gb }
    });
    (gin, grads)
}
