//! DirectCapsNet assembly: conv stack, primary capsules, class capsules and
//! the reconstruction decoder.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Param, Real, Tape, Tensor, Var};
use crate::capsules::{predict_from_lengths, CapsuleSet, ClassCapsLayer, PrimaryCapsLayer, RoutingOptions, RoutingState};
use crate::data::{tile, Image};
use crate::error::{Error, Result};
use crate::losses::{AnchorBank, AnchorMode, LossWeights, MarginParams, Reduction};
use crate::nn::{Activation, BatchNorm, Conv2d, Dense, Layer, Mode};
use crate::seed::{derive_seed, tag};

/// HR side length above which the deeper conv stack is the default.
pub const DEEP_STACK_THRESHOLD: usize = 96;

/// What the decoder sees of the class capsules.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderInput {
    /// All `K` capsules concatenated with the unselected ones zeroed.
    #[default]
    MaskedConcat,
    /// The selected capsule's activity vector alone.
    SelectedOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawModelConfig")]
pub struct ModelConfig {
    pub num_classes: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub conv_filters: Vec<usize>,
    pub conv_kernel: usize,
    pub conv_stride: usize,
    pub conv_padding: usize,
    pub primary_types: usize,
    pub primary_kernel: usize,
    pub primary_stride: usize,
    pub caps_dim_primary: usize,
    pub caps_dim_class: usize,
    pub routing_iterations: usize,
    pub detach_agreement: bool,
    pub recon_hidden: [usize; 2],
    pub decoder_input: DecoderInput,
    pub margin: MarginParams,
    pub loss_weights: LossWeights,
    pub reduction: Reduction,
    pub anchor_mode: AnchorMode,
    pub batch_size: usize,
}

/// File form of [`ModelConfig`]; omitted fields take defaults that depend
/// on the input size.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawModelConfig {
    num_classes: usize,
    channels: usize,
    height: usize,
    width: usize,
    conv_filters: Option<Vec<usize>>,
    conv_kernel: Option<usize>,
    conv_stride: Option<usize>,
    conv_padding: Option<usize>,
    primary_types: Option<usize>,
    primary_kernel: Option<usize>,
    primary_stride: Option<usize>,
    caps_dim_primary: Option<usize>,
    caps_dim_class: Option<usize>,
    routing_iterations: Option<usize>,
    detach_agreement: Option<bool>,
    recon_hidden: Option<[usize; 2]>,
    decoder_input: Option<DecoderInput>,
    margin: Option<MarginParams>,
    loss_weights: Option<LossWeights>,
    reduction: Option<Reduction>,
    anchor_mode: Option<AnchorMode>,
    batch_size: Option<usize>,
}

impl TryFrom<RawModelConfig> for ModelConfig {
    type Error = Error;

    fn try_from(r: RawModelConfig) -> Result<Self> {
        let d = ModelConfig::for_input(r.num_classes, r.channels, r.height, r.width);
        let cfg = ModelConfig {
            conv_filters: r.conv_filters.unwrap_or(d.conv_filters),
            conv_kernel: r.conv_kernel.unwrap_or(d.conv_kernel),
            conv_stride: r.conv_stride.unwrap_or(d.conv_stride),
            conv_padding: r.conv_padding.unwrap_or(d.conv_padding),
            primary_types: r.primary_types.unwrap_or(d.primary_types),
            primary_kernel: r.primary_kernel.unwrap_or(d.primary_kernel),
            primary_stride: r.primary_stride.unwrap_or(d.primary_stride),
            caps_dim_primary: r.caps_dim_primary.unwrap_or(d.caps_dim_primary),
            caps_dim_class: r.caps_dim_class.unwrap_or(d.caps_dim_class),
            routing_iterations: r.routing_iterations.unwrap_or(d.routing_iterations),
            detach_agreement: r.detach_agreement.unwrap_or(d.detach_agreement),
            recon_hidden: r.recon_hidden.unwrap_or(d.recon_hidden),
            decoder_input: r.decoder_input.unwrap_or(d.decoder_input),
            margin: r.margin.unwrap_or(d.margin),
            loss_weights: r.loss_weights.unwrap_or(d.loss_weights),
            reduction: r.reduction.unwrap_or(d.reduction),
            anchor_mode: r.anchor_mode.unwrap_or(d.anchor_mode),
            batch_size: r.batch_size.unwrap_or(d.batch_size),
            ..d
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Spatial sizes through the network.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Geometry {
    /// `(channels, h, w)` after each conv layer.
    pub conv_outputs: Vec<(usize, usize, usize)>,
    pub feature_dim: usize,
    pub primary_grid: (usize, usize),
    pub num_primary_caps: usize,
    pub recon_len: usize,
}

impl ModelConfig {
    /// Defaults for an input geometry: 5×5 convolutions with padding 2; a
    /// single 128-filter layer and batch 100 up to 96 pixels, three
    /// stride-2 layers `[16, 32, 128]` and batch 32 above.
    pub fn for_input(num_classes: usize, channels: usize, height: usize, width: usize) -> Self {
        let deep = height.max(width) > DEEP_STACK_THRESHOLD;
        ModelConfig {
            num_classes,
            channels,
            height,
            width,
            conv_filters: if deep { vec![16, 32, 128] } else { vec![128] },
            conv_kernel: 5,
            conv_stride: if deep { 2 } else { 1 },
            conv_padding: 2,
            primary_types: 32,
            primary_kernel: 9,
            primary_stride: 2,
            caps_dim_primary: 8,
            caps_dim_class: 16,
            routing_iterations: crate::capsules::DEFAULT_ROUTING_ITERATIONS,
            detach_agreement: true,
            recon_hidden: [512, 1024],
            decoder_input: DecoderInput::MaskedConcat,
            margin: MarginParams::default(),
            loss_weights: LossWeights::default(),
            reduction: Reduction::Mean,
            anchor_mode: AnchorMode::Gradient,
            batch_size: if deep { 32 } else { 100 },
        }
    }

    pub fn geometry(&self) -> Result<Geometry> {
        let bad = |detail: String| Error::Config(detail);
        let fit = |size: usize, k: usize, s: usize, p: usize| (size + 2 * p).checked_sub(k).map(|v| v / s + 1);
        let (mut c, mut h, mut w) = (self.channels, self.height, self.width);
        let mut conv_outputs = Vec::new();
        for (i, &f) in self.conv_filters.iter().enumerate() {
            let (Some(nh), Some(nw)) = (
                fit(h, self.conv_kernel, self.conv_stride, self.conv_padding),
                fit(w, self.conv_kernel, self.conv_stride, self.conv_padding),
            ) else {
                return Err(bad(format!("conv layer {i}: {}x{} kernel does not fit a {h}x{w} input", self.conv_kernel, self.conv_kernel)));
            };
            (c, h, w) = (f, nh, nw);
            conv_outputs.push((c, h, w));
        }
        let (Some(ph), Some(pw)) = (
            fit(h, self.primary_kernel, self.primary_stride, 0),
            fit(w, self.primary_kernel, self.primary_stride, 0),
        ) else {
            return Err(bad(format!(
                "primary capsule kernel {} does not fit the {h}x{w} feature map",
                self.primary_kernel
            )));
        };
        Ok(Geometry {
            conv_outputs,
            feature_dim: c * h * w,
            primary_grid: (ph, pw),
            num_primary_caps: self.primary_types * ph * pw,
            recon_len: self.channels * self.height * self.width,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_classes", self.num_classes),
            ("channels", self.channels),
            ("height", self.height),
            ("width", self.width),
            ("conv_kernel", self.conv_kernel),
            ("conv_stride", self.conv_stride),
            ("primary_types", self.primary_types),
            ("primary_kernel", self.primary_kernel),
            ("primary_stride", self.primary_stride),
            ("caps_dim_primary", self.caps_dim_primary),
            ("caps_dim_class", self.caps_dim_class),
            ("routing_iterations", self.routing_iterations),
            ("recon_hidden[0]", self.recon_hidden[0]),
            ("recon_hidden[1]", self.recon_hidden[1]),
            ("batch_size", self.batch_size),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.num_classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {}", self.num_classes)));
        }
        if self.conv_filters.is_empty() || self.conv_filters.contains(&0) {
            return Err(Error::Config(format!("conv_filters must be non-empty and positive, got {:?}", self.conv_filters)));
        }
        self.margin.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.loss_weights.validate().map_err(|e| Error::Config(e.to_string()))?;
        if let AnchorMode::RunningMean { momentum } = self.anchor_mode {
            if !(0.0..1.0).contains(&momentum) {
                return Err(Error::Config(format!("anchor momentum must lie in [0, 1), got {momentum}")));
            }
        }
        self.geometry().map(|_| ())
    }

    pub fn decoder_width(&self) -> usize {
        match self.decoder_input {
            DecoderInput::MaskedConcat => self.num_classes * self.caps_dim_class,
            DecoderInput::SelectedOnly => self.caps_dim_class,
        }
    }

    pub fn routing(&self) -> RoutingOptions {
        RoutingOptions {
            iterations: self.routing_iterations,
            detach_agreement: self.detach_agreement,
        }
    }
}

/// Which class capsule the decoder reconstructs from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decode<'a> {
    /// The given classes (training: ground truth).
    Classes(&'a [usize]),
    /// Each sample's predicted class.
    Predicted,
    /// Skip the decoder.
    None,
}

/// Tape handles from a batched forward pass.
#[derive(Debug, Clone)]
pub struct TapeForward<T> {
    /// `[N, feature_dim]` flattened final conv output.
    pub features: Var,
    /// `[N, K, m]`.
    pub class_caps: Var,
    /// `[N, K]`.
    pub lengths: Var,
    /// `[N, C·H·W]`.
    pub recon: Option<Var>,
    /// Class decoded per sample, when the decoder ran.
    pub decoded: Vec<usize>,
    pub routing: RoutingState<T>,
}

/// Plain-tensor output for one sample.
#[derive(Debug, Clone)]
pub struct ForwardOutput<T> {
    pub features: Tensor<T>,
    pub class_caps: CapsuleSet<T>,
    /// `[C, H, W]`.
    pub recon: Tensor<T>,
    pub predicted: usize,
}

#[derive(Debug, Clone)]
pub struct ConvBlock<T> {
    pub conv: Conv2d<T>,
    pub bn: BatchNorm<T>,
}

#[derive(Debug, Clone)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub geometry: Geometry,
    pub blocks: Vec<ConvBlock<T>>,
    pub primary: PrimaryCapsLayer<T>,
    pub class_caps: ClassCapsLayer<T>,
    pub decoder: [Dense<T>; 3],
    pub anchors: AnchorBank<T>,
}

impl<T: Real> Model<T> {
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let geometry = config.geometry()?;
        let mut in_ch = config.channels;
        let mut blocks = Vec::new();
        for (i, &f) in config.conv_filters.iter().enumerate() {
            blocks.push(ConvBlock {
                conv: Conv2d::new(
                    &format!("conv{i}"),
                    in_ch,
                    f,
                    config.conv_kernel,
                    config.conv_stride,
                    config.conv_padding,
                ),
                bn: BatchNorm::new(&format!("bn{i}"), f),
            });
            in_ch = f;
        }
        let primary = PrimaryCapsLayer::new(
            "primary",
            in_ch,
            config.primary_types,
            config.caps_dim_primary,
            config.primary_kernel,
            config.primary_stride,
        );
        let class_caps = ClassCapsLayer::new(
            "class_caps",
            geometry.num_primary_caps,
            config.caps_dim_primary,
            config.num_classes,
            config.caps_dim_class,
            config.routing(),
        );
        let [h1, h2] = config.recon_hidden;
        let decoder = [
            Dense::new("decoder0", config.decoder_width(), h1, Activation::Relu),
            Dense::new("decoder1", h1, h2, Activation::Relu),
            Dense::new("decoder2", h2, geometry.recon_len, Activation::Sigmoid),
        ];
        let anchors = AnchorBank::new(config.num_classes, geometry.feature_dim, config.anchor_mode);
        let mut model = Model {
            config,
            geometry,
            blocks,
            primary,
            class_caps,
            decoder,
            anchors,
        };
        model.init_parameters(seed);
        Ok(model)
    }

    /// Deterministic re-initialization; every layer draws from its own
    /// stream derived from `seed`.
    pub fn init_parameters(&mut self, seed: u64) {
        let mut layers: Vec<&mut dyn Layer<T>> = Vec::new();
        for b in &mut self.blocks {
            layers.push(&mut b.conv);
            layers.push(&mut b.bn);
        }
        layers.push(&mut self.primary);
        layers.push(&mut self.class_caps);
        for d in &mut self.decoder {
            layers.push(d);
        }
        for (i, layer) in layers.into_iter().enumerate() {
            layer.init_parameters(derive_seed(seed, &[tag::INIT, i as u64]));
        }
        self.anchors.anchors.value.data_mut().iter_mut().for_each(|v| *v = T::zero());
    }

    pub fn feature_dim(&self) -> usize {
        self.geometry.feature_dim
    }

    /// Trainable parameters in a fixed order. Anchors are included only
    /// when they are learned by gradient.
    pub fn params(&self) -> Vec<&Param<T>> {
        let mut out = Vec::new();
        for b in &self.blocks {
            out.extend(b.conv.params());
            out.extend(b.bn.params());
        }
        out.extend(self.primary.params());
        out.extend(self.class_caps.params());
        for d in &self.decoder {
            out.extend(d.params());
        }
        if matches!(self.anchors.mode, AnchorMode::Gradient) {
            out.push(&self.anchors.anchors);
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut out = Vec::new();
        for b in &mut self.blocks {
            out.extend(b.conv.params_mut());
            out.extend(b.bn.params_mut());
        }
        out.extend(self.primary.params_mut());
        out.extend(self.class_caps.params_mut());
        for d in &mut self.decoder {
            out.extend(d.params_mut());
        }
        if matches!(self.anchors.mode, AnchorMode::Gradient) {
            out.push(&mut self.anchors.anchors);
        }
        out
    }

    /// Every persistent tensor: parameters, batch-norm running statistics
    /// and the anchor bank, in a fixed order with unique names.
    pub fn state(&self) -> Vec<&Param<T>> {
        let mut out = self.params();
        for b in &self.blocks {
            out.extend(b.bn.buffers());
        }
        if !matches!(self.anchors.mode, AnchorMode::Gradient) {
            out.push(&self.anchors.anchors);
        }
        out
    }

    pub fn state_mut(&mut self) -> Vec<&mut Param<T>> {
        let gradient_anchors = matches!(self.anchors.mode, AnchorMode::Gradient);
        let mut out = Vec::new();
        let mut buffers = Vec::new();
        for b in &mut self.blocks {
            out.extend(b.conv.params_mut());
            let bn = &mut b.bn;
            out.extend([&mut bn.gamma, &mut bn.beta]);
            buffers.extend([&mut bn.running_mean, &mut bn.running_var]);
        }
        out.extend(self.primary.params_mut());
        out.extend(self.class_caps.params_mut());
        for d in &mut self.decoder {
            out.extend(d.params_mut());
        }
        if gradient_anchors {
            out.push(&mut self.anchors.anchors);
            out.extend(buffers);
        } else {
            out.extend(buffers);
            out.push(&mut self.anchors.anchors);
        }
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.params().iter().map(|p| p.value.len()).sum()
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let c = &self.config;
        if shape.len() != 4 || shape[1..] != [c.channels, c.height, c.width] {
            return Err(Error::shape(
                "model",
                format!("expected [N, {}, {}, {}] input, got {shape:?}", c.channels, c.height, c.width),
            ));
        }
        Ok(())
    }

    /// Batched forward pass recording on `tape`. HR and VLR inputs share
    /// the same path; `x` is `[N, C, H, W]` at HR geometry.
    pub fn forward_tape(&mut self, tape: &mut Tape<T>, x: Var, mode: Mode, decode: Decode<'_>) -> Result<TapeForward<T>> {
        let shape = tape.shape(x).to_vec();
        self.check_input(&shape)?;
        let n = shape[0];
        let mut h = x;
        for b in &mut self.blocks {
            h = b.conv.forward(tape, h)?;
            h = b.bn.forward(tape, h, mode)?;
            h = tape.relu(h)?;
        }
        let features = tape.reshape(h, &[n, self.geometry.feature_dim])?;
        let u = self.primary.forward(tape, h)?;
        let (v, routing) = self.class_caps.forward(tape, u)?;
        let lengths = tape.l2_norm(v)?;

        let k = self.config.num_classes;
        let decoded: Vec<usize> = match decode {
            Decode::None => Vec::new(),
            Decode::Classes(cs) => {
                if cs.len() != n {
                    return Err(Error::shape("model", format!("{} decode classes for batch of {n}", cs.len())));
                }
                if let Some(&c) = cs.iter().find(|&&c| c >= k) {
                    return Err(Error::InvalidArgument(format!("class {c} out of range for {k} classes")));
                }
                cs.to_vec()
            }
            Decode::Predicted => tape.value(lengths).data().chunks(k).map(predict_from_lengths).collect(),
        };
        let recon = if decoded.is_empty() {
            None
        } else {
            Some(self.decode(tape, v, &decoded)?)
        };
        Ok(TapeForward {
            features,
            class_caps: v,
            lengths,
            recon,
            decoded,
            routing,
        })
    }

    fn decode(&self, tape: &mut Tape<T>, v: Var, classes: &[usize]) -> Result<Var> {
        let (n, k, m) = (classes.len(), self.config.num_classes, self.config.caps_dim_class);
        let mut mask = Tensor::<T>::zeros(&[n, k, m]);
        for (i, &c) in classes.iter().enumerate() {
            let start = (i * k + c) * m;
            mask.data_mut()[start..start + m].iter_mut().for_each(|x| *x = T::one());
        }
        let mask = tape.constant(mask);
        let masked = tape.mul(v, mask)?;
        let mut z = match self.config.decoder_input {
            DecoderInput::MaskedConcat => tape.reshape(masked, &[n, k * m])?,
            DecoderInput::SelectedOnly => tape.sum_axis(masked, 1)?,
        };
        for d in &self.decoder {
            z = d.forward(tape, z)?;
        }
        Ok(z)
    }

    /// Eval-mode forward of one `[C, H, W]` image. Reconstructs from
    /// `target_class` when given, otherwise from the predicted class.
    pub fn forward(&mut self, x: &Tensor<T>, target_class: Option<usize>) -> Result<ForwardOutput<T>> {
        let s = x.shape().to_vec();
        let mut shape = vec![1];
        shape.extend(s);
        let batched = x.clone().reshaped(&shape)?;
        let mut tape = Tape::new();
        let xv = tape.constant(batched);
        let targets = target_class.map(|c| [c]);
        let decode = match &targets {
            Some(t) => Decode::Classes(t),
            None => Decode::Predicted,
        };
        let out = self.forward_tape(&mut tape, xv, Mode::Eval, decode)?;
        let (k, m) = (self.config.num_classes, self.config.caps_dim_class);
        let caps = tape.value(out.class_caps).clone().reshaped(&[k, m])?;
        let class_caps = CapsuleSet::from_activities(caps)?;
        let recon_var = out.recon.expect("decoder ran");
        Ok(ForwardOutput {
            features: tape.value(out.features).clone().reshaped(&[self.geometry.feature_dim])?,
            predicted: predict_from_lengths(class_caps.lengths().data()),
            class_caps,
            recon: tape
                .value(recon_var)
                .clone()
                .reshaped(&[self.config.channels, self.config.height, self.config.width])?,
        })
    }

    /// Eval-mode capsule lengths `[N, K]` for a batch of images.
    pub fn scores(&mut self, images: &[&Image]) -> Result<Vec<Vec<T>>> {
        if images.is_empty() {
            return Ok(Vec::new());
        }
        let mut tape = Tape::new();
        let x = tape.constant(stack_images(images)?);
        let out = self.forward_tape(&mut tape, x, Mode::Eval, Decode::None)?;
        Ok(tape
            .value(out.lengths)
            .data()
            .chunks(self.config.num_classes)
            .map(<[T]>::to_vec)
            .collect())
    }
}

/// Stacks equally sized images into `[N, C, H, W]`.
pub fn stack_images<T: Real>(images: &[&Image]) -> Result<Tensor<T>> {
    let first = images
        .first()
        .ok_or_else(|| Error::InvalidArgument("cannot stack zero images".into()))?;
    let mut data = Vec::with_capacity(images.len() * first.len());
    for img in images {
        if !img.same_geometry(first) {
            return Err(Error::shape("stack_images", "images differ in geometry".to_string()));
        }
        data.extend(img.data().iter().map(|&v| T::from_f32(v)));
    }
    Tensor::new(&[images.len(), first.channels(), first.height(), first.width()], data)
}

/// One row of a reconstruction grid.
#[derive(Debug, Clone)]
pub struct ReconRow {
    pub label: usize,
    pub hr_input: Image,
    pub vlr_input: Image,
    pub hr_recon: Image,
    pub vlr_recon: Image,
    /// Pixelwise MSE between the HR and VLR reconstructions.
    pub recon_mse: f64,
}

/// Side-by-side inputs and reconstructions for qualitative inspection.
#[derive(Debug, Clone, Default)]
pub struct ReconGrid {
    pub rows: Vec<ReconRow>,
}

impl ReconGrid {
    /// Columns: HR input, HR reconstruction, VLR input, VLR reconstruction.
    /// `None` for an empty grid.
    pub fn to_image(&self) -> Result<Option<Image>> {
        let cells: Vec<Image> = self
            .rows
            .iter()
            .flat_map(|r| [r.hr_input.clone(), r.hr_recon.clone(), r.vlr_input.clone(), r.vlr_recon.clone()])
            .collect();
        tile(&cells, 4, 1.0)
    }

    pub fn mean_recon_mse(&self) -> Option<f64> {
        (!self.rows.is_empty()).then(|| self.rows.iter().map(|r| r.recon_mse).sum::<f64>() / self.rows.len() as f64)
    }
}

/// Reconstructs each `(hr, vlr, label)` triple from the true class
/// capsule and pairs the results.
pub fn reconstruct_grid<T: Real>(model: &mut Model<T>, samples: &[(Image, Image, usize)]) -> Result<ReconGrid> {
    let mut rows = Vec::with_capacity(samples.len());
    for (hr, vlr, label) in samples {
        let hr_out = model.forward(&hr.to_tensor(), Some(*label))?;
        let vlr_out = model.forward(&vlr.to_tensor(), Some(*label))?;
        let hr_recon = Image::from_tensor(&hr_out.recon)?;
        let vlr_recon = Image::from_tensor(&vlr_out.recon)?;
        rows.push(ReconRow {
            label: *label,
            recon_mse: hr_recon.mse(&vlr_recon)?,
            hr_input: hr.clone(),
            vlr_input: vlr.clone(),
            hr_recon,
            vlr_recon,
        });
    }
    Ok(ReconGrid { rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            conv_filters: vec![4],
            conv_kernel: 3,
            conv_padding: 1,
            primary_types: 2,
            primary_kernel: 3,
            primary_stride: 2,
            caps_dim_primary: 4,
            caps_dim_class: 4,
            recon_hidden: [6, 8],
            batch_size: 4,
            ..ModelConfig::for_input(2, 1, 8, 8)
        }
    }

    #[test]
    fn default_rule_by_input_size() {
        let small = ModelConfig::for_input(10, 3, 32, 32);
        assert_eq!((small.conv_filters.clone(), small.batch_size), (vec![128], 100));
        let large = ModelConfig::for_input(10, 3, 100, 100);
        assert_eq!((large.conv_filters.clone(), large.batch_size), (vec![16, 32, 128], 32));
    }

    #[test]
    fn svhn_geometry() {
        let cfg = ModelConfig::for_input(10, 3, 32, 32);
        let g = cfg.geometry().unwrap();
        assert_eq!(g.recon_len, 3072);
        assert_eq!(g.conv_outputs, vec![(128, 32, 32)]);
        assert_eq!(g.feature_dim, 128 * 32 * 32);
        // (32 - 9) / 2 + 1 = 12.
        assert_eq!(g.primary_grid, (12, 12));
        assert_eq!(g.num_primary_caps, 32 * 144);
    }

    #[test]
    fn deep_stack_geometry() {
        let cfg = ModelConfig {
            conv_filters: vec![16, 32, 128],
            conv_stride: 2,
            primary_kernel: 3,
            ..ModelConfig::for_input(10, 3, 96, 96)
        };
        // 96 -> 48 -> 24 -> 12, then (12 - 3) / 2 + 1 = 5.
        let g = cfg.geometry().unwrap();
        assert_eq!(g.conv_outputs.last(), Some(&(128, 12, 12)));
        assert_eq!(g.feature_dim, 128 * 144);
        assert_eq!(g.primary_grid, (5, 5));
    }

    #[test]
    fn inconsistent_geometry_is_rejected() {
        let cfg = ModelConfig {
            primary_kernel: 40,
            ..ModelConfig::for_input(10, 1, 32, 32)
        };
        assert!(matches!(Model::<f32>::build(cfg, 0), Err(Error::Config(_))));
    }

    #[test]
    fn toml_defaults_and_round_trip() {
        let cfg: ModelConfig = toml::from_str("num_classes = 4\nchannels = 1\nheight = 32\nwidth = 32\nconv_filters = [16]\n").unwrap();
        assert_eq!(cfg.conv_filters, vec![16]);
        assert_eq!(cfg.batch_size, 100);
        let text = toml::to_string(&cfg).unwrap();
        let back: ModelConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        assert!(toml::from_str::<ModelConfig>("num_classes = 4\nchannels = 1\nheight = 32\nwidth = 32\nbogus = 1\n").is_err());
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = Model::<f32>::build(tiny_config(), 5).unwrap();
        let b = Model::<f32>::build(tiny_config(), 5).unwrap();
        let c = Model::<f32>::build(tiny_config(), 6).unwrap();
        let va: Vec<_> = a.state().iter().map(|p| p.value.clone()).collect();
        let vb: Vec<_> = b.state().iter().map(|p| p.value.clone()).collect();
        let vc: Vec<_> = c.state().iter().map(|p| p.value.clone()).collect();
        assert_eq!(va, vb);
        assert_ne!(va, vc);
        let mut names: Vec<_> = a.state().iter().map(|p| p.name.clone()).collect();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), a.state().len());
    }

    #[test]
    fn zero_input_predicts_class_zero() {
        let mut m = Model::<f64>::build(tiny_config(), 1).unwrap();
        let out = m.forward(&Tensor::zeros(&[1, 8, 8]), None).unwrap();
        let l = out.class_caps.lengths().data().to_vec();
        assert!(l.iter().all(|&v| v == l[0]));
        assert_eq!(out.predicted, 0);
        assert_eq!(out.recon.shape(), &[1, 8, 8]);
    }

    #[test]
    fn eval_forward_is_deterministic_and_rejects_bad_input() {
        let mut m = Model::<f64>::build(tiny_config(), 2).unwrap();
        let x = Tensor::from_f64(&[1, 8, 8], &(0..64).map(|i| (i % 7) as f64 / 7.0).collect::<Vec<_>>()).unwrap();
        let a = m.forward(&x, None).unwrap();
        let b = m.forward(&x, None).unwrap();
        assert_eq!(a.recon, b.recon);
        assert_eq!(a.class_caps, b.class_caps);
        assert!(m.forward(&Tensor::zeros(&[1, 9, 8]), None).is_err());
    }

    #[test]
    fn recon_ignores_unselected_capsules() {
        let m = Model::<f64>::build(tiny_config(), 3).unwrap();
        let (k, d) = (2, 4);
        let base: Vec<f64> = (0..k * d).map(|i| 0.1 * i as f64 - 0.3).collect();
        let mut other = base.clone();
        for v in &mut other[d..] {
            *v += 0.7;
        }
        let run = |caps: &[f64]| {
            let mut tape = Tape::new();
            let v = tape.constant(Tensor::from_f64(&[1, k, d], caps).unwrap());
            let r = m.decode(&mut tape, v, &[0]).unwrap();
            tape.value(r).clone()
        };
        assert_eq!(run(&base), run(&other));
        let mut own = base.clone();
        own[0] += 0.7;
        assert_ne!(run(&base), run(&own));
    }

    #[test]
    fn hr_and_vlr_share_the_tape_structure() {
        let mut m = Model::<f32>::build(tiny_config(), 4).unwrap();
        let hr = Image::new(1, 8, 8, (0..64).map(|i| ((i * 13) % 17) as f32 / 17.0).collect()).unwrap();
        let (vlr, _) = crate::data::make_vlr_pair(&hr, 2).unwrap();
        let ops = |img: &Image, m: &mut Model<f32>| {
            let mut tape = Tape::new();
            let x = tape.constant(stack_images(&[img]).unwrap());
            m.forward_tape(&mut tape, x, Mode::Eval, Decode::Classes(&[1])).unwrap();
            tape.op_names()
        };
        assert_eq!(ops(&hr, &mut m), ops(&vlr, &mut m));
    }

    #[test]
    fn grid_renders_untrained_and_empty() {
        let mut m = Model::<f32>::build(tiny_config(), 4).unwrap();
        assert!(reconstruct_grid(&mut m, &[]).unwrap().to_image().unwrap().is_none());
        let hr = Image::filled(1, 8, 8, 0.5);
        let grid = reconstruct_grid(&mut m, &[(hr.clone(), hr.clone(), 1)]).unwrap();
        let img = grid.to_image().unwrap().unwrap();
        assert_eq!((img.height(), img.width()), (8, 4 * 9 - 1));
        assert_eq!(grid.mean_recon_mse(), Some(0.0));
    }
}
