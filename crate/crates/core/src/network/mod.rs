//! A small differentiable detector: conv/ReLU/max-pool groups, a transposed
//! convolution back up to half input resolution, dense class and transform
//! heads, and a two-layer box-regression head fed by configuration pooling.

pub(crate) mod layers;
mod pooling;

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use layers::{deconv_geometry, softmax};
pub use pooling::{configuration_pooling, configuration_pooling_backward};

use crate::geometry::TransformParams;
use crate::losses::BoxDelta;
use crate::proposals::DenseOutputs;
use crate::{Error, Result, NUM_CLASSES, NUM_KEYPOINTS};

/// Channels produced by the transform head.
pub const TRANSFORM_DIM: usize = 8;
/// Inputs in `[0, 1]` are mapped to `(v - 0.5) * INPUT_GAIN`, i.e. onto
/// `[-2, 2]`.
pub const INPUT_GAIN: f64 = 4.0;
/// Scale applied to the initial weights of the two regression output layers.
pub const REGRESSOR_INIT_GAIN: f64 = 0.01;

/// A `channels x height x width` activation, channel-major, row 0 at the
/// bottom.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl FeatureMap {
    pub fn new(channels: usize, height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::ShapeMismatch("feature map with a zero dimension".into()));
        }
        if values.len() != channels * height * width {
            return Err(Error::LengthMismatch { expected: channels * height * width, found: values.len() });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("feature map value is not finite".into()));
        }
        Ok(Self { channels, height, width, values })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self { channels, height, width, values: vec![0.0; channels * height * width] }
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.values[(c * self.height + y) * self.width + x]
    }

    pub fn at_mut(&mut self, c: usize, y: usize, x: usize) -> &mut f64 {
        &mut self.values[(c * self.height + y) * self.width + x]
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let hw = self.height * self.width;
        &self.values[c * hw..(c + 1) * hw]
    }
}

/// Dimensions plus row-major values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(dims: &[usize]) -> Self {
        Self { dims: dims.to_vec(), data: vec![0.0; dims.iter().product()] }
    }

    fn glorot(dims: &[usize], fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let limit = libm::sqrt(6.0 / (fan_in + fan_out) as f64);
        let n = dims.iter().product();
        Self { dims: dims.to_vec(), data: (0..n).map(|_| rng.gen_range(-limit..limit)).collect() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Layer {
    fn zeros(weight_dims: &[usize], out: usize) -> Self {
        Self { weight: Tensor::zeros(weight_dims), bias: Tensor::zeros(&[out]) }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// `(layer_count, channel_count)` per group; every group ends with a
    /// stride-2 max pool.
    pub conv_groups: Vec<(usize, usize)>,
    pub upsample_factor: usize,
    /// Channels of the upsampled map, i.e. features pooled per keypoint.
    pub pooled_feature_dim: usize,
    pub fc_hidden_dim: usize,
    pub kernel_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            conv_groups: vec![(2, 8), (2, 16), (2, 32)],
            upsample_factor: 4,
            pooled_feature_dim: 16,
            fc_hidden_dim: 32,
            kernel_size: 3,
        }
    }
}

impl ModelConfig {
    /// Total downsampling of the backbone.
    pub fn stride(&self) -> usize {
        1 << self.conv_groups.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.into()));
        if self.conv_groups.is_empty() || self.conv_groups.iter().any(|&(l, c)| l == 0 || c == 0) {
            return bad("conv groups need at least one layer and one channel each");
        }
        if self.conv_groups.len() > 16 {
            return bad("too many conv groups");
        }
        if self.kernel_size % 2 == 0 {
            return bad("kernel size must be odd");
        }
        if self.pooled_feature_dim == 0 || self.fc_hidden_dim == 0 || self.upsample_factor == 0 {
            return bad("dimensions must be positive");
        }
        if 2 * self.upsample_factor != self.stride() {
            return Err(Error::InvalidArgument(format!(
                "upsample factor {} does not bring stride {} back to half resolution",
                self.upsample_factor,
                self.stride()
            )));
        }
        Ok(())
    }

    pub fn pooled_len(&self) -> usize {
        NUM_KEYPOINTS * self.pooled_feature_dim
    }
}

/// Every learnable tensor of the model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub convs: Vec<Vec<Layer>>,
    pub upsample: Layer,
    pub cls_head: Layer,
    pub transform_head: Layer,
    pub bbox_fc1: Layer,
    pub bbox_fc2: Layer,
}

impl ModelParams {
    pub fn zeros(config: &ModelConfig) -> Self {
        let k = config.kernel_size;
        let mut in_ch = 3;
        let mut convs = Vec::new();
        for &(layers, ch) in &config.conv_groups {
            let mut group = Vec::new();
            for _ in 0..layers {
                group.push(Layer::zeros(&[ch, in_ch, k, k], ch));
                in_ch = ch;
            }
            convs.push(group);
        }
        let (uk, _) = deconv_geometry(config.upsample_factor);
        let up = config.pooled_feature_dim;
        Self {
            convs,
            upsample: Layer::zeros(&[in_ch, up, uk, uk], up),
            cls_head: Layer::zeros(&[NUM_CLASSES, up, 1, 1], NUM_CLASSES),
            transform_head: Layer::zeros(&[TRANSFORM_DIM, up, 1, 1], TRANSFORM_DIM),
            bbox_fc1: Layer::zeros(&[config.fc_hidden_dim, config.pooled_len()], config.fc_hidden_dim),
            bbox_fc2: Layer::zeros(&[4, config.fc_hidden_dim], 4),
        }
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init(config: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Self::zeros(config);
        for (name, t) in params.weights_mut() {
            let (fan_in, fan_out) = match t.dims.as_slice() {
                [o, i] => (*i, *o),
                // the transposed convolution stores [in][out][k][k]
                [i, o, kh, kw] if name == "upsample" => (i * kh * kw, o * kh * kw),
                [o, i, kh, kw] => (i * kh * kw, o * kh * kw),
                _ => unreachable!("weights are 2D or 4D"),
            };
            *t = Tensor::glorot(&t.dims.clone(), fan_in, fan_out, &mut rng);
        }
        // regressor outputs start near their neutral values: every cell
        // proposes the untransformed mean face and box deltas are ~0
        for w in [&mut params.transform_head.weight, &mut params.bbox_fc2.weight] {
            w.data.iter_mut().for_each(|v| *v *= REGRESSOR_INIT_GAIN);
        }
        params.transform_head.bias.data.copy_from_slice(&TransformParams::IDENTITY.to_array());
        params
    }

    fn layers(&self) -> Vec<(String, &Layer)> {
        let mut out = Vec::new();
        for (g, group) in self.convs.iter().enumerate() {
            for (l, layer) in group.iter().enumerate() {
                out.push((format!("conv{}_{}", g + 1, l + 1), layer));
            }
        }
        out.push(("upsample".into(), &self.upsample));
        out.push(("cls_head".into(), &self.cls_head));
        out.push(("transform_head".into(), &self.transform_head));
        out.push(("bbox_fc1".into(), &self.bbox_fc1));
        out.push(("bbox_fc2".into(), &self.bbox_fc2));
        out
    }

    fn layers_mut(&mut self) -> Vec<(String, &mut Layer)> {
        let mut out = Vec::new();
        for (g, group) in self.convs.iter_mut().enumerate() {
            for (l, layer) in group.iter_mut().enumerate() {
                out.push((format!("conv{}_{}", g + 1, l + 1), layer));
            }
        }
        out.push(("upsample".into(), &mut self.upsample));
        out.push(("cls_head".into(), &mut self.cls_head));
        out.push(("transform_head".into(), &mut self.transform_head));
        out.push(("bbox_fc1".into(), &mut self.bbox_fc1));
        out.push(("bbox_fc2".into(), &mut self.bbox_fc2));
        out
    }

    /// Names of the layers, in checkpoint order.
    pub fn layer_names(&self) -> Vec<String> {
        self.layers().into_iter().map(|(n, _)| n).collect()
    }

    /// All tensors as `("<layer>.weight" | "<layer>.bias", tensor)`.
    pub fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (name, layer) in self.layers() {
            out.push((format!("{name}.weight"), &layer.weight));
            out.push((format!("{name}.bias"), &layer.bias));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (name, layer) in self.layers_mut() {
            out.push((format!("{name}.weight"), &mut layer.weight));
            out.push((format!("{name}.bias"), &mut layer.bias));
        }
        out
    }

    fn weights_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        self.layers_mut().into_iter().map(|(n, l)| (n, &mut l.weight)).collect()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors().into_iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors_mut().into_iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.data.len()).sum()
    }

    /// `self += alpha * other`, tensor by tensor.
    pub fn add_scaled(&mut self, alpha: f64, other: &ModelParams) {
        for ((_, t), (_, o)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (a, b) in t.data.iter_mut().zip(&o.data) {
                *a += alpha * b;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.data.iter().all(|v| v.is_finite()))
    }

    /// True when both parameter sets have the same tensor names and shapes.
    pub fn same_shape(&self, other: &ModelParams) -> bool {
        let (a, b) = (self.tensors(), other.tensors());
        a.len() == b.len() && a.iter().zip(&b).all(|((na, ta), (nb, tb))| na == nb && ta.dims == tb.dims)
    }
}

/// Activations kept by [`Model::forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    pub dense: DenseOutputs,
    /// Upsampled features (after ReLU): the map used by configuration pooling.
    pub features: FeatureMap,
    version: u64,
    /// Input of every conv layer, in order, and its post-ReLU output.
    conv_io: Vec<(FeatureMap, FeatureMap)>,
    pools: Vec<(Vec<usize>, usize)>,
    up_input: FeatureMap,
}

impl Forward {
    /// Which ReLUs fired and which inputs won each max pool. Two forwards
    /// with equal patterns lie on the same smooth piece of the network.
    pub fn activation_pattern(&self) -> (Vec<bool>, Vec<usize>) {
        let relu = self
            .conv_io
            .iter()
            .flat_map(|(_, out)| out.values.iter())
            .chain(self.features.values.iter())
            .map(|v| *v > 0.0)
            .collect();
        let pools = self.pools.iter().flat_map(|(arg, _)| arg.iter().copied()).collect();
        (relu, pools)
    }
}

/// Loss gradients arriving at the heads. Empty vectors mean zero.
#[derive(Debug, Clone, Default)]
pub struct HeadGradients {
    /// Per grid cell, with respect to the pre-softmax class scores.
    pub class_scores: Vec<[f64; NUM_CLASSES]>,
    /// Per grid cell, layout of [`TransformParams::to_array`].
    pub transform: Vec<[f64; TRANSFORM_DIM]>,
    /// Channel-major gradient on [`Forward::features`].
    pub features: Vec<f64>,
}

impl HeadGradients {
    pub fn zeros(fwd: &Forward) -> Self {
        let cells = fwd.dense.width * fwd.dense.height;
        Self {
            class_scores: vec![[0.0; NUM_CLASSES]; cells],
            transform: vec![[0.0; TRANSFORM_DIM]; cells],
            features: vec![0.0; fwd.features.values.len()],
        }
    }
}

/// Activations of one bbox-head evaluation.
#[derive(Debug, Clone)]
pub struct BboxHeadCache {
    pooled: Vec<f64>,
    hidden: Vec<f64>,
    version: u64,
}

impl BboxHeadCache {
    /// Which hidden ReLUs fired.
    pub fn hidden_active(&self) -> Vec<bool> {
        self.hidden.iter().map(|h| *h > 0.0).collect()
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    params: ModelParams,
    version: u64,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = ModelParams::init(&config, seed);
        Ok(Self { config, params, version: 0 })
    }

    pub fn from_params(config: ModelConfig, params: ModelParams) -> Result<Self> {
        config.validate()?;
        if !params.same_shape(&ModelParams::zeros(&config)) {
            return Err(Error::ShapeMismatch("parameters do not match the configuration".into()));
        }
        Ok(Self { config, params, version: 0 })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    /// Mutable access; invalidates outstanding activations.
    pub fn params_mut(&mut self) -> &mut ModelParams {
        self.version += 1;
        &mut self.params
    }

    pub fn into_params(self) -> ModelParams {
        self.params
    }

    /// Plain gradient descent step.
    pub fn sgd_step(&mut self, grads: &ModelParams, lr: f64) {
        if lr != 0.0 {
            self.params_mut().add_scaled(-lr, grads);
        }
    }

    /// Dense outputs for an RGB image with values in `[0, 1]`; both sides must
    /// be multiples of [`ModelConfig::stride`].
    pub fn forward(&self, image: &FeatureMap) -> Result<Forward> {
        let stride = self.config.stride();
        if image.channels != 3 {
            return Err(Error::ShapeMismatch(format!("expected 3 input channels, got {}", image.channels)));
        }
        if image.height % stride != 0 || image.width % stride != 0 {
            return Err(Error::ShapeMismatch(format!(
                "image {}x{} is not divisible by the backbone stride {stride}",
                image.width, image.height
            )));
        }
        let k = self.config.kernel_size;
        let mut x = image.clone();
        x.values.iter_mut().for_each(|v| *v = (*v - 0.5) * INPUT_GAIN);
        let mut conv_io = Vec::new();
        let mut pools = Vec::new();
        for group in &self.params.convs {
            for layer in group {
                let out_ch = layer.bias.data.len();
                let mut y = layers::conv_forward(
                    &x.values,
                    x.channels,
                    x.height,
                    x.width,
                    &layer.weight.data,
                    &layer.bias.data,
                    out_ch,
                    k,
                );
                layers::relu_inplace(&mut y);
                let y = FeatureMap { channels: out_ch, height: x.height, width: x.width, values: y };
                conv_io.push((x, y.clone()));
                x = y;
            }
            let (pooled, arg) = layers::maxpool_forward(&x.values, x.channels, x.height, x.width);
            pools.push((arg, x.values.len()));
            x = FeatureMap { channels: x.channels, height: x.height / 2, width: x.width / 2, values: pooled };
        }

        let (uk, up) = deconv_geometry(self.config.upsample_factor);
        let up_ch = self.config.pooled_feature_dim;
        let (mut fv, fh, fw) = layers::deconv_forward(
            &x.values,
            x.channels,
            x.height,
            x.width,
            &self.params.upsample.weight.data,
            &self.params.upsample.bias.data,
            up_ch,
            uk,
            self.config.upsample_factor,
            up,
        );
        layers::relu_inplace(&mut fv);
        let features = FeatureMap { channels: up_ch, height: fh, width: fw, values: fv };

        let head = |layer: &Layer, n: usize| {
            layers::conv_forward(&features.values, up_ch, fh, fw, &layer.weight.data, &layer.bias.data, n, 1)
        };
        let scores = head(&self.params.cls_head, NUM_CLASSES);
        let tf = head(&self.params.transform_head, TRANSFORM_DIM);

        let cells = fh * fw;
        let mut class_probs = Vec::with_capacity(cells);
        let mut transform = Vec::with_capacity(cells);
        let mut s = [0.0; NUM_CLASSES];
        for i in 0..cells {
            for (c, v) in s.iter_mut().enumerate() {
                *v = scores[c * cells + i];
            }
            let mut p = [0.0; NUM_CLASSES];
            softmax(&s, &mut p);
            class_probs.push(p);
            transform.push(TransformParams::from_array(core::array::from_fn(|t| tf[t * cells + i])));
        }
        let dense = DenseOutputs { width: fw, height: fh, class_probs, transform };
        Ok(Forward { dense, features, version: self.version, conv_io, pools, up_input: x })
    }

    /// Reverse pass from the head gradients; accumulates into `grads`.
    pub fn backward(&self, fwd: &Forward, head: &HeadGradients, grads: &mut ModelParams) -> Result<()> {
        if fwd.version != self.version {
            return Err(Error::StaleActivations);
        }
        let (fh, fw) = (fwd.features.height, fwd.features.width);
        let cells = fh * fw;
        let up_ch = self.config.pooled_feature_dim;
        for (name, len, expected) in [
            ("class", head.class_scores.len(), cells),
            ("transform", head.transform.len(), cells),
            ("feature", head.features.len(), fwd.features.values.len()),
        ] {
            if len != 0 && len != expected {
                return Err(Error::ShapeMismatch(format!("{name} gradient has {len} entries, expected {expected}")));
            }
        }

        let mut d_feat = if head.features.is_empty() { vec![0.0; up_ch * cells] } else { head.features.clone() };
        let mut head_back = |layer: &Layer, dl: &mut Layer, n: usize, d: Vec<f64>| {
            let di = layers::conv_backward(
                &fwd.features.values,
                up_ch,
                fh,
                fw,
                &layer.weight.data,
                n,
                1,
                &d,
                &mut dl.weight.data,
                &mut dl.bias.data,
            );
            for (a, b) in d_feat.iter_mut().zip(di) {
                *a += b;
            }
        };
        if !head.class_scores.is_empty() {
            let mut d = vec![0.0; NUM_CLASSES * cells];
            for (i, g) in head.class_scores.iter().enumerate() {
                for c in 0..NUM_CLASSES {
                    d[c * cells + i] = g[c];
                }
            }
            head_back(&self.params.cls_head, &mut grads.cls_head, NUM_CLASSES, d);
        }
        if !head.transform.is_empty() {
            let mut d = vec![0.0; TRANSFORM_DIM * cells];
            for (i, g) in head.transform.iter().enumerate() {
                for t in 0..TRANSFORM_DIM {
                    d[t * cells + i] = g[t];
                }
            }
            head_back(&self.params.transform_head, &mut grads.transform_head, TRANSFORM_DIM, d);
        }

        layers::relu_backward_inplace(&fwd.features.values, &mut d_feat);
        let (uk, up) = deconv_geometry(self.config.upsample_factor);
        let x = &fwd.up_input;
        let mut d = layers::deconv_backward(
            &x.values,
            x.channels,
            x.height,
            x.width,
            &self.params.upsample.weight.data,
            up_ch,
            uk,
            self.config.upsample_factor,
            up,
            &d_feat,
            &mut grads.upsample.weight.data,
            &mut grads.upsample.bias.data,
        );

        let k = self.config.kernel_size;
        let mut io = fwd.conv_io.iter().rev();
        for (g, group) in self.params.convs.iter().enumerate().rev() {
            let (arg, len) = &fwd.pools[g];
            d = layers::maxpool_backward(arg, &d, *len);
            for (l, layer) in group.iter().enumerate().rev() {
                let (input, output) = io.next().expect("one cached activation per conv layer");
                layers::relu_backward_inplace(&output.values, &mut d);
                let dl = &mut grads.convs[g][l];
                d = layers::conv_backward(
                    &input.values,
                    input.channels,
                    input.height,
                    input.width,
                    &layer.weight.data,
                    output.channels,
                    k,
                    &d,
                    &mut dl.weight.data,
                    &mut dl.bias.data,
                );
            }
        }
        Ok(())
    }

    /// Affine, ReLU, affine to four box-delta outputs.
    pub fn bbox_head(&self, pooled: &[f64]) -> Result<(BoxDelta, BboxHeadCache)> {
        if pooled.len() != self.config.pooled_len() {
            return Err(Error::ShapeMismatch(format!(
                "pooled vector has {} entries, expected {}",
                pooled.len(),
                self.config.pooled_len()
            )));
        }
        let p = &self.params;
        let mut hidden = layers::linear_forward(pooled, &p.bbox_fc1.weight.data, &p.bbox_fc1.bias.data);
        layers::relu_inplace(&mut hidden);
        let out = layers::linear_forward(&hidden, &p.bbox_fc2.weight.data, &p.bbox_fc2.bias.data);
        let delta = BoxDelta::from_array([out[0], out[1], out[2], out[3]]);
        Ok((delta, BboxHeadCache { pooled: pooled.to_vec(), hidden, version: self.version }))
    }

    /// Accumulates head gradients and returns the gradient on the pooled
    /// vector.
    pub fn bbox_head_backward(&self, cache: &BboxHeadCache, d_delta: &BoxDelta, grads: &mut ModelParams) -> Result<Vec<f64>> {
        if cache.version != self.version {
            return Err(Error::StaleActivations);
        }
        let p = &self.params;
        let mut d_hidden = layers::linear_backward(
            &cache.hidden,
            &p.bbox_fc2.weight.data,
            &d_delta.to_array(),
            &mut grads.bbox_fc2.weight.data,
            &mut grads.bbox_fc2.bias.data,
        );
        layers::relu_backward_inplace(&cache.hidden, &mut d_hidden);
        Ok(layers::linear_backward(
            &cache.pooled,
            &p.bbox_fc1.weight.data,
            &d_hidden,
            &mut grads.bbox_fc1.weight.data,
            &mut grads.bbox_fc1.bias.data,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(h: usize, w: usize, seed: u64) -> FeatureMap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FeatureMap::new(3, h, w, (0..3 * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn zero_model_is_uniform() {
        let config = ModelConfig::default();
        let model = Model::from_params(config.clone(), ModelParams::zeros(&config)).unwrap();
        let fwd = model.forward(&image(32, 48, 1)).unwrap();
        assert_eq!((fwd.dense.width, fwd.dense.height), (24, 16));
        for p in &fwd.dense.class_probs {
            assert!(p.iter().all(|v| (v - 1.0 / 11.0).abs() < 1e-15));
        }
        assert!(fwd.dense.transform.iter().all(|t| *t == TransformParams::default()));
    }

    #[test]
    fn output_grid_is_half_resolution() {
        let model = Model::new(ModelConfig::default(), 3).unwrap();
        for (h, w) in [(8, 8), (16, 40), (64, 64)] {
            let fwd = model.forward(&image(h, w, 2)).unwrap();
            assert_eq!((fwd.dense.height, fwd.dense.width), (h / 2, w / 2));
            for p in &fwd.dense.class_probs {
                assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
                assert!(p.iter().all(|v| v.is_finite() && *v >= 0.0));
            }
            assert!(fwd.dense.transform.iter().all(|t| t.is_finite()));
        }
    }

    #[test]
    fn rejects_bad_shapes() {
        let model = Model::new(ModelConfig::default(), 3).unwrap();
        assert!(matches!(model.forward(&image(12, 16, 0)), Err(Error::ShapeMismatch(_))));
        let gray = FeatureMap::zeros(1, 16, 16);
        assert!(matches!(model.forward(&gray), Err(Error::ShapeMismatch(_))));
        let bad = ModelConfig { upsample_factor: 2, ..ModelConfig::default() };
        assert!(Model::new(bad, 0).is_err());
    }

    #[test]
    fn forward_is_deterministic() {
        let model = Model::new(ModelConfig::default(), 11).unwrap();
        let img = image(16, 16, 5);
        let a = model.forward(&img).unwrap();
        let b = model.forward(&img).unwrap();
        assert_eq!(a.dense, b.dense);
        assert_eq!(Model::new(ModelConfig::default(), 11).unwrap().params(), model.params());
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        let model = Model::new(ModelConfig::default(), 4).unwrap();
        let fwd = model.forward(&image(16, 16, 6)).unwrap();
        let mut grads = ModelParams::zeros(model.config());
        model.backward(&fwd, &HeadGradients::zeros(&fwd), &mut grads).unwrap();
        assert!(grads.tensors().iter().all(|(_, t)| t.data.iter().all(|v| *v == 0.0)));
    }

    #[test]
    fn stale_activations_are_rejected() {
        let mut model = Model::new(ModelConfig::default(), 4).unwrap();
        let fwd = model.forward(&image(16, 16, 6)).unwrap();
        let (_, cache) = model.bbox_head(&vec![0.1; model.config().pooled_len()]).unwrap();
        model.params_mut();
        let mut grads = ModelParams::zeros(model.config());
        assert_eq!(model.backward(&fwd, &HeadGradients::default(), &mut grads), Err(Error::StaleActivations));
        assert_eq!(
            model.bbox_head_backward(&cache, &BoxDelta::default(), &mut grads).unwrap_err(),
            Error::StaleActivations
        );
    }

    #[test]
    fn bbox_head_cases() {
        let config = ModelConfig { pooled_feature_dim: 1, fc_hidden_dim: 4, ..ModelConfig::default() };
        let mut model = Model::from_params(config.clone(), ModelParams::zeros(&config)).unwrap();
        let pooled = [0.3, 0.2, 0.7, 0.9, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        assert_eq!(model.bbox_head(&pooled).unwrap().0, BoxDelta::default());

        let p = model.params_mut();
        for i in 0..4 {
            p.bbox_fc1.weight.data[i * 10 + i] = 1.0;
            p.bbox_fc2.weight.data[i * 4 + i] = 1.0;
        }
        assert_eq!(model.bbox_head(&pooled).unwrap().0, BoxDelta::from_array([0.3, 0.2, 0.7, 0.9]));
        assert!(matches!(model.bbox_head(&[0.0; 3]), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn named_tensors_cover_every_layer() {
        let params = ModelParams::zeros(&ModelConfig::default());
        let names = params.layer_names();
        assert_eq!(names.first().unwrap(), "conv1_1");
        assert!(names.contains(&"conv3_2".into()) && names.contains(&"bbox_fc2".into()));
        assert_eq!(params.tensors().len(), 2 * names.len());
        assert_eq!(params.get("upsample.weight").unwrap().dims, vec![32, 16, 8, 8]);
    }
}
