//! The interpolation network: a shared pyramid encoder, a bottom decoder,
//! three refining decoders and the context synthesis step that turns
//! flows, mask and residual into an image at every level.
//!
//! All weights live in one ordered [`Parameters`] list. Forward passes read
//! them through a cursor in exactly that order, so the layout built by
//! [`ModelConfig::layout`] is the single description of the network.

mod params;

use std::fmt;
use std::ops::Range;

pub use params::{Init, ParamSpec, Parameters};

use crate::error::{ensure_arg, Result};
use crate::tensor::{ConvSpec, Real, Shape, Tensor};
use crate::warp::{
    backward_warp, build_pyramid, crop_back, pad_to_multiple, CropRecord, ImagePyramid,
};

/// Feature widths of encoder levels 1 to 4.
pub const ENCODER_WIDTHS: [usize; 4] = [48, 96, 144, 192];
/// Number of image pyramid levels (full resolution plus three halvings).
pub const PYRAMID_LEVELS: usize = 4;
/// Input sides are padded to a multiple of this.
pub const SIZE_MULTIPLE: usize = 16;
/// Channels emitted by each decoder: two flows, mask logit, residual.
pub const DECODER_OUTPUTS: usize = 8;

const PRELU_INIT: f64 = 0.25;
/// Init gain of the output transposed convs. Small initial flows, masks
/// near 0.5 and residuals near zero start the network close to the
/// linear blend.
const OUTPUT_GAIN: f64 = 0.1;

fn prelu_gain() -> f64 {
    (2.0 / (1.0 + PRELU_INIT * PRELU_INIT)).sqrt()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    /// Width of every decoder body.
    pub hidden_width: usize,
    /// Group count of the grouped decoder convolutions.
    pub groups: usize,
    /// Feed unwarped features and drop the flow, mask and residual inputs.
    pub ablate_pmr: bool,
    /// Drop the previous image estimate from decoder inputs.
    pub ablate_pcr: bool,
    /// Predict images with a direct head instead of warp-and-blend.
    pub ablate_csm: bool,
    /// Whether convolutions carry a bias.
    pub conv_bias: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden_width: 288,
            groups: 3,
            ablate_pmr: false,
            ablate_pcr: false,
            ablate_csm: false,
            conv_bias: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        ensure_arg!(self.hidden_width > 0, "hidden width must be positive");
        ensure_arg!(self.groups > 0, "group count must be positive");
        ensure_arg!(
            self.hidden_width % self.groups == 0,
            "hidden width {} is not divisible by {} groups",
            self.hidden_width,
            self.groups
        );
        Ok(())
    }

    /// Input channels of the decoder at encoder level `level` (1..=4).
    pub fn decoder_input_channels(&self, level: usize) -> usize {
        let c = ENCODER_WIDTHS[level - 1];
        if level == PYRAMID_LEVELS {
            return 2 * c;
        }
        let motion = if self.ablate_pmr { 0 } else { 2 + 2 + 1 + 3 };
        let image = if self.ablate_pcr { 0 } else { 3 };
        2 * c + motion + image
    }

    /// Ordered parameter layout: encoder blocks 1 to 4, then decoders 4 down
    /// to 1.
    pub fn layout(&self) -> Vec<ParamSpec> {
        let mut b = LayoutBuilder {
            specs: Vec::new(),
            bias: self.conv_bias,
        };
        let mut in_c = 3;
        for (i, &c) in ENCODER_WIDTHS.iter().enumerate() {
            let p = format!("encoder.block{}", i + 1);
            b.conv(&format!("{p}.conv1"), in_c, c, 3, 1, prelu_gain());
            b.prelu(&format!("{p}.prelu1"), c);
            b.conv(&format!("{p}.conv2"), c, c, 3, 1, prelu_gain());
            b.prelu(&format!("{p}.prelu2"), c);
            in_c = c;
        }
        let h = self.hidden_width;
        for level in (1..=PYRAMID_LEVELS).rev() {
            let p = format!("decoder{level}");
            b.conv(
                &format!("{p}.conv0"),
                self.decoder_input_channels(level),
                h,
                3,
                1,
                prelu_gain(),
            );
            b.prelu(&format!("{p}.prelu0"), h);
            for j in 1..=3 {
                b.conv(&format!("{p}.gconv{j}"), h, h, 3, self.groups, prelu_gain());
                b.prelu(&format!("{p}.prelu{j}"), h);
            }
            b.deconv(&format!("{p}.deconv"), h, DECODER_OUTPUTS);
            if self.ablate_csm {
                b.deconv(&format!("{p}.head"), h, 3);
            }
        }
        b.specs
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.layout().iter().map(|s| s.shape.numel()).sum()
    }

    /// Short description naming every structural switch.
    pub fn fingerprint(&self) -> String {
        let on = |ablated: bool| if ablated { "off" } else { "on" };
        format!(
            "hidden={} groups={} pmr={} pcr={} csm={} bias={}",
            self.hidden_width,
            self.groups,
            on(self.ablate_pmr),
            on(self.ablate_pcr),
            on(self.ablate_csm),
            if self.conv_bias { "on" } else { "off" }
        )
    }
}

struct LayoutBuilder {
    specs: Vec<ParamSpec>,
    bias: bool,
}

impl LayoutBuilder {
    fn push(&mut self, name: String, shape: Shape, init: Init) {
        self.specs.push(ParamSpec { name, shape, init });
    }

    fn bias_of(&mut self, name: &str, c: usize) {
        if self.bias {
            self.push(
                format!("{name}.bias"),
                Shape::new(1, c, 1, 1),
                Init::Constant(0.0),
            );
        }
    }

    fn conv(&mut self, name: &str, in_c: usize, out_c: usize, k: usize, groups: usize, gain: f64) {
        let fan_in = in_c / groups * k * k;
        self.push(
            format!("{name}.weight"),
            Shape::new(out_c, in_c / groups, k, k),
            Init::KaimingUniform { fan_in, gain },
        );
        self.bias_of(name, out_c);
    }

    /// 4x4 stride-2 transposed convolution, used only for decoder outputs. Each output pixel sees a quarter
    /// of the kernel taps, which sets the effective fan-in.
    fn deconv(&mut self, name: &str, in_c: usize, out_c: usize) {
        self.push(
            format!("{name}.weight"),
            Shape::new(in_c, out_c, 4, 4),
            Init::KaimingUniform {
                fan_in: in_c * 4,
                gain: OUTPUT_GAIN,
            },
        );
        self.bias_of(name, out_c);
    }

    fn prelu(&mut self, name: &str, c: usize) {
        self.push(
            format!("{name}.slope"),
            Shape::new(1, c, 1, 1),
            Init::Constant(PRELU_INIT),
        );
    }
}

/// Quantities predicted at one pyramid level.
#[derive(Clone, Debug)]
pub struct LevelState<T: Real> {
    /// Pyramid level; spatial size is the padded input size over `2^level`.
    pub level: usize,
    /// Flow from the target frame into frame 0.
    pub flow_t0: Tensor<T>,
    /// Flow from the target frame into frame 1.
    pub flow_t1: Tensor<T>,
    /// Blending weight of warped frame 0, in `[0, 1]`.
    pub mask: Tensor<T>,
    pub residual: Tensor<T>,
    /// Image estimate at this level.
    pub image: Tensor<T>,
}

/// Everything a forward pass produces.
#[derive(Clone, Debug)]
pub struct ForwardOutput<T: Real> {
    /// Full-resolution estimate cropped back to the input size.
    pub prediction: Tensor<T>,
    /// `states[l]` is the state at pyramid level `l`.
    pub states: Vec<LevelState<T>>,
    pub pyramid0: ImagePyramid<T>,
    pub pyramid1: ImagePyramid<T>,
    pub crop: CropRecord,
}

impl<T: Real> ForwardOutput<T> {
    /// Image estimates for levels 0 to 3 at padded resolution.
    pub fn level_images(&self) -> Vec<Tensor<T>> {
        self.states.iter().map(|s| s.image.clone()).collect()
    }
}

/// Warp both frames toward the target time and blend them:
/// `M * w(I0, F_t0) + (1 - M) * w(I1, F_t1) + R`.
pub fn csm_apply<T: Real>(
    mask: &Tensor<T>,
    residual: &Tensor<T>,
    flow_t0: &Tensor<T>,
    flow_t1: &Tensor<T>,
    image0: &Tensor<T>,
    image1: &Tensor<T>,
) -> Result<Tensor<T>> {
    ensure_arg!(
        residual.shape() == image0.shape(),
        "residual {} does not match image {}",
        residual.shape(),
        image0.shape()
    );
    let warped0 = backward_warp(image0, flow_t0)?;
    let warped1 = backward_warp(image1, flow_t1)?;
    warped0.blend(&warped1, mask)?.add(residual)
}

/// Reads weights in layout order.
struct Cursor<'a, T: Real> {
    weights: &'a [Tensor<T>],
    next: usize,
    bias: bool,
}

impl<'a, T: Real> Cursor<'a, T> {
    fn take(&mut self) -> &'a Tensor<T> {
        let t = &self.weights[self.next];
        self.next += 1;
        t
    }

    fn conv(&mut self, x: &Tensor<T>, stride: usize, groups: usize) -> Result<Tensor<T>> {
        let kernel = self.take();
        let bias = self.bias.then(|| self.take());
        x.conv2d(
            &ConvSpec::new(kernel)
                .bias(bias)
                .stride(stride)
                .padding(1)
                .groups(groups),
        )
    }

    fn deconv(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let kernel = self.take();
        let bias = self.bias.then(|| self.take());
        x.conv_transpose2d(&ConvSpec::new(kernel).bias(bias).stride(2).padding(1))
    }

    fn prelu(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.prelu(self.take())
    }
}

/// Network weights plus structure.
#[derive(Clone, Debug)]
pub struct Pmcrnet<T: Real> {
    config: ModelConfig,
    params: Parameters<T>,
}

impl<T: Real> Pmcrnet<T> {
    /// A freshly initialized network.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = Parameters::initialize(&config.layout(), seed);
        Ok(Pmcrnet { config, params })
    }

    /// Wraps existing weights, checking them against the configuration.
    pub fn from_parameters(config: ModelConfig, named: Vec<(String, Tensor<T>)>) -> Result<Self> {
        config.validate()?;
        let params = Parameters::from_tensors(&config.layout(), named)?;
        Ok(Pmcrnet { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn parameters(&self) -> &Parameters<T> {
        &self.params
    }

    pub fn parameters_mut(&mut self) -> &mut Parameters<T> {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    /// `(name, shape)` for every tensor in serialization order.
    pub fn named_parameters(&self) -> Vec<(String, Shape)> {
        self.params
            .iter()
            .map(|(n, t)| (n.to_string(), t.shape()))
            .collect()
    }

    /// Index ranges of the encoder and of decoders 4, 3, 2, 1 in the
    /// parameter list.
    fn segments(&self) -> [Range<usize>; 5] {
        let names = self.params.names();
        let end_of = |prefix: &str, from: usize| {
            from + names[from..]
                .iter()
                .take_while(|n| n.starts_with(prefix))
                .count()
        };
        let enc = end_of("encoder.", 0);
        let d4 = end_of("decoder4.", enc);
        let d3 = end_of("decoder3.", d4);
        let d2 = end_of("decoder2.", d3);
        let d1 = end_of("decoder1.", d2);
        [0..enc, enc..d4, d4..d3, d3..d2, d2..d1]
    }

    fn cursor<'a>(&self, weights: &'a [Tensor<T>], range: Range<usize>) -> Cursor<'a, T> {
        Cursor {
            weights: &weights[range],
            next: 0,
            bias: self.config.conv_bias,
        }
    }

    fn check_weights(&self, weights: &[Tensor<T>]) -> Result<()> {
        ensure_arg!(
            weights.len() == self.params.len(),
            "expected {} weight tensors, got {}",
            self.params.len(),
            weights.len()
        );
        for ((name, own), given) in self.params.iter().zip(weights) {
            ensure_arg!(
                own.shape() == given.shape(),
                "shape mismatch for {name}: expected {}, found {}",
                own.shape(),
                given.shape()
            );
        }
        Ok(())
    }

    /// Pyramid features `[phi^1, .., phi^4]` of one frame.
    pub fn encode(&self, image: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        self.encode_with(self.params.tensors(), image)
    }

    fn encode_with(&self, weights: &[Tensor<T>], image: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let s = image.shape();
        ensure_arg!(s.c() == 3, "expected a 3-channel image, got {s}");
        ensure_arg!(
            s.h() % SIZE_MULTIPLE == 0 && s.w() % SIZE_MULTIPLE == 0,
            "encoder input {s} is not a multiple of {SIZE_MULTIPLE}"
        );
        let mut cur = self.cursor(weights, self.segments()[0].clone());
        let mut x = image.clone();
        let mut features = Vec::with_capacity(ENCODER_WIDTHS.len());
        for _ in ENCODER_WIDTHS {
            x = cur.conv(&x, 2, 1)?;
            x = cur.prelu(&x)?;
            x = cur.conv(&x, 1, 1)?;
            x = cur.prelu(&x)?;
            features.push(x.clone());
        }
        Ok(features)
    }

    /// Shared decoder body. Returns the 8-channel output at twice the input
    /// resolution and, under the CSM ablation, the direct image head.
    fn decoder_body(
        &self,
        cur: &mut Cursor<'_, T>,
        input: &Tensor<T>,
    ) -> Result<(Tensor<T>, Option<Tensor<T>>)> {
        let mut x = cur.conv(input, 1, 1)?;
        x = cur.prelu(&x)?;
        for _ in 0..3 {
            x = cur.conv(&x, 1, self.config.groups)?;
            x = x.channel_shuffle(self.config.groups)?;
            x = cur.prelu(&x)?;
        }
        let out = cur.deconv(&x)?;
        let head = if self.config.ablate_csm {
            Some(cur.deconv(&x)?)
        } else {
            None
        };
        Ok((out, head))
    }

    fn state_from(
        &self,
        level: usize,
        out: Tensor<T>,
        head: Option<Tensor<T>>,
        pyramid0: &ImagePyramid<T>,
        pyramid1: &ImagePyramid<T>,
    ) -> Result<LevelState<T>> {
        let parts = out.split_channels(&[2, 2, 1, 3])?;
        let [flow_t0, flow_t1, logit, residual]: [Tensor<T>; 4] = parts
            .try_into()
            .map_err(|_| crate::Error::InvalidArgument("decoder split".into()))?;
        let mask = logit.sigmoid();
        let (i0, i1) = (pyramid0.level(level), pyramid1.level(level));
        ensure_arg!(
            i0.shape().same_nhw(&flow_t0.shape()),
            "pyramid level {level} is {} but the decoder produced {}",
            i0.shape(),
            flow_t0.shape()
        );
        let image = match head {
            Some(direct) => direct,
            None => csm_apply(&mask, &residual, &flow_t0, &flow_t1, i0, i1)?,
        };
        Ok(LevelState {
            level,
            flow_t0,
            flow_t1,
            mask,
            residual,
            image,
        })
    }

    /// Bottom decoder: deepest features of both frames to the level-3 state.
    pub fn decode_bottom(
        &self,
        phi0: &Tensor<T>,
        phi1: &Tensor<T>,
        pyramid0: &ImagePyramid<T>,
        pyramid1: &ImagePyramid<T>,
    ) -> Result<LevelState<T>> {
        self.decode_bottom_with(self.params.tensors(), phi0, phi1, pyramid0, pyramid1)
    }

    fn decode_bottom_with(
        &self,
        weights: &[Tensor<T>],
        phi0: &Tensor<T>,
        phi1: &Tensor<T>,
        pyramid0: &ImagePyramid<T>,
        pyramid1: &ImagePyramid<T>,
    ) -> Result<LevelState<T>> {
        let c = ENCODER_WIDTHS[PYRAMID_LEVELS - 1];
        ensure_arg!(
            phi0.shape().c() == c && phi0.shape() == phi1.shape(),
            "bottom decoder expects two {c}-channel feature maps, got {} and {}",
            phi0.shape(),
            phi1.shape()
        );
        let mut cur = self.cursor(weights, self.segments()[1].clone());
        let input = Tensor::concat(&[phi0, phi1])?;
        let (out, head) = self.decoder_body(&mut cur, &input)?;
        self.state_from(PYRAMID_LEVELS - 1, out, head, pyramid0, pyramid1)
    }

    /// Refining decoder at encoder level `level` (1..=3): consumes the state
    /// at that level and produces the state one level finer.
    pub fn decode_step(
        &self,
        level: usize,
        state: &LevelState<T>,
        phi0: &Tensor<T>,
        phi1: &Tensor<T>,
        pyramid0: &ImagePyramid<T>,
        pyramid1: &ImagePyramid<T>,
    ) -> Result<LevelState<T>> {
        self.decode_step_with(
            self.params.tensors(),
            level,
            state,
            phi0,
            phi1,
            pyramid0,
            pyramid1,
        )
    }

    #[allow(clippy::too_many_arguments)]
    fn decode_step_with(
        &self,
        weights: &[Tensor<T>],
        level: usize,
        state: &LevelState<T>,
        phi0: &Tensor<T>,
        phi1: &Tensor<T>,
        pyramid0: &ImagePyramid<T>,
        pyramid1: &ImagePyramid<T>,
    ) -> Result<LevelState<T>> {
        ensure_arg!(
            (1..PYRAMID_LEVELS).contains(&level),
            "decoder level {level} is not in 1..=3"
        );
        ensure_arg!(
            state.level == level,
            "state is at level {}, decoder expects {level}",
            state.level
        );
        let c = ENCODER_WIDTHS[level - 1];
        ensure_arg!(
            phi0.shape().c() == c && phi0.shape() == phi1.shape(),
            "decoder {level} expects two {c}-channel feature maps, got {} and {}",
            phi0.shape(),
            phi1.shape()
        );
        let mut parts: Vec<Tensor<T>> = Vec::with_capacity(7);
        if self.config.ablate_pmr {
            parts.push(phi0.clone());
            parts.push(phi1.clone());
        } else {
            parts.push(backward_warp(phi0, &state.flow_t0)?);
            parts.push(backward_warp(phi1, &state.flow_t1)?);
            parts.extend([
                state.flow_t0.clone(),
                state.flow_t1.clone(),
                state.mask.clone(),
                state.residual.clone(),
            ]);
        }
        if !self.config.ablate_pcr {
            parts.push(state.image.clone());
        }
        let refs: Vec<&Tensor<T>> = parts.iter().collect();
        let input = Tensor::concat(&refs)?;
        let mut cur = self.cursor(weights, self.segments()[PYRAMID_LEVELS + 1 - level].clone());
        let (out, head) = self.decoder_body(&mut cur, &input)?;
        self.state_from(level - 1, out, head, pyramid0, pyramid1)
    }

    /// Interpolates the midpoint frame with the network's own weights.
    pub fn forward(&self, frame0: &Tensor<T>, frame1: &Tensor<T>) -> Result<ForwardOutput<T>> {
        self.forward_with(self.params.tensors(), frame0, frame1)
    }

    /// Forward pass with externally supplied weights (for instance tape
    /// leaves produced by [`Parameters::track`]).
    pub fn forward_with(
        &self,
        weights: &[Tensor<T>],
        frame0: &Tensor<T>,
        frame1: &Tensor<T>,
    ) -> Result<ForwardOutput<T>> {
        self.check_weights(weights)?;
        let (s0, s1) = (frame0.shape(), frame1.shape());
        ensure_arg!(s0 == s1, "frame size mismatch: {s0} vs {s1}");
        ensure_arg!(s0.c() == 3, "expected 3-channel frames, got {s0}");
        let (padded0, crop) = pad_to_multiple(frame0, SIZE_MULTIPLE)?;
        let (padded1, _) = pad_to_multiple(frame1, SIZE_MULTIPLE)?;
        let pyramid0 = build_pyramid(&padded0, PYRAMID_LEVELS)?;
        let pyramid1 = build_pyramid(&padded1, PYRAMID_LEVELS)?;
        let phi0 = self.encode_with(weights, &padded0)?;
        let phi1 = self.encode_with(weights, &padded1)?;

        let deepest = PYRAMID_LEVELS - 1;
        let mut state = self.decode_bottom_with(
            weights,
            &phi0[deepest],
            &phi1[deepest],
            &pyramid0,
            &pyramid1,
        )?;
        let mut states = vec![state.clone()];
        for level in (1..PYRAMID_LEVELS).rev() {
            state = self.decode_step_with(
                weights,
                level,
                &state,
                &phi0[level - 1],
                &phi1[level - 1],
                &pyramid0,
                &pyramid1,
            )?;
            states.push(state.clone());
        }
        states.reverse();
        let prediction = crop_back(&states[0].image, crop)?;
        Ok(ForwardOutput {
            prediction,
            states,
            pyramid0,
            pyramid1,
            crop,
        })
    }
}

impl fmt::Display for ModelConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.fingerprint())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> ModelConfig {
        ModelConfig {
            hidden_width: 12,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn default_count_matches_layer_sums() {
        let cfg = ModelConfig::default();
        let conv = |i: usize, o: usize, g: usize| i / g * o * 9 + o;
        let encoder: usize = [(3, 48), (48, 96), (96, 144), (144, 192)]
            .iter()
            .map(|&(i, o)| conv(i, o, 1) + conv(o, o, 1) + 2 * o)
            .sum();
        let decoder =
            |i: usize| conv(i, 288, 1) + 3 * conv(288, 288, 3) + 4 * 288 + 288 * 8 * 16 + 8;
        let total = encoder + decoder(384) + decoder(299) + decoder(203) + decoder(107);
        assert_eq!(cfg.param_count(), total);
        assert_eq!(total, 6_756_560);
    }

    #[test]
    fn decoder_inputs_follow_ablation() {
        let mut cfg = ModelConfig::default();
        assert_eq!(cfg.decoder_input_channels(1), 107);
        assert_eq!(cfg.decoder_input_channels(4), 384);
        cfg.ablate_pmr = true;
        assert_eq!(cfg.decoder_input_channels(2), 2 * 96 + 3);
        cfg.ablate_pmr = false;
        cfg.ablate_pcr = true;
        assert_eq!(cfg.decoder_input_channels(3), 2 * 144 + 8);
    }

    #[test]
    fn layout_names_are_unique_and_ordered() {
        let layout = ModelConfig::default().layout();
        let mut names: Vec<_> = layout.iter().map(|s| s.name.as_str()).collect();
        assert_eq!(names[0], "encoder.block1.conv1.weight");
        assert_eq!(*names.last().unwrap(), "decoder1.deconv.bias");
        names.sort_unstable();
        names.dedup();
        assert_eq!(names.len(), layout.len());
    }

    #[test]
    fn csm_head_changes_count() {
        let base = ModelConfig::default();
        let ablated = ModelConfig {
            ablate_csm: true,
            ..base.clone()
        };
        assert_eq!(
            ablated.param_count() - base.param_count(),
            4 * (288 * 3 * 16 + 3)
        );
    }

    #[test]
    fn groups_must_divide_width() {
        let cfg = ModelConfig {
            hidden_width: 10,
            ..ModelConfig::default()
        };
        assert!(Pmcrnet::<f32>::new(cfg, 0).is_err());
    }

    #[test]
    fn shape_ladder_on_small_input() {
        let net = Pmcrnet::<f32>::new(small_config(), 3).unwrap();
        let i0 = Tensor::from_fn([1, 3, 32, 48], |_, c, y, x| ((c + y + x) % 7) as f32 / 7.0);
        let out = net.forward(&i0, &i0).unwrap();
        for (l, s) in out.states.iter().enumerate() {
            assert_eq!(s.image.shape(), Shape::new(1, 3, 32 >> l, 48 >> l));
            assert_eq!(s.flow_t0.shape().c(), 2);
        }
        assert!(out.prediction.all_finite());
    }

    #[test]
    fn odd_sizes_are_padded_and_cropped() {
        let net = Pmcrnet::<f32>::new(small_config(), 3).unwrap();
        let i0 = Tensor::full([1, 3, 20, 17], 0.5f32);
        let out = net.forward(&i0, &i0).unwrap();
        assert_eq!(out.prediction.shape(), Shape::new(1, 3, 20, 17));
        assert_eq!(out.states[0].image.shape(), Shape::new(1, 3, 32, 32));
    }

    #[test]
    fn mismatched_frames_rejected() {
        let net = Pmcrnet::<f32>::new(small_config(), 3).unwrap();
        let a = Tensor::zeros([1, 3, 16, 16]);
        let b = Tensor::zeros([1, 3, 16, 32]);
        let err = net.forward(&a, &b).unwrap_err();
        assert!(err.to_string().contains("frame size mismatch"));
    }

    #[test]
    fn zero_weights_average_the_frames() {
        let cfg = small_config();
        let net = Pmcrnet::<f64>::new(cfg.clone(), 1).unwrap();
        let zeros = net
            .parameters()
            .iter()
            .map(|(n, t)| (n.to_string(), Tensor::zeros(t.shape())))
            .collect();
        let net = Pmcrnet::from_parameters(cfg, zeros).unwrap();
        let i0 = Tensor::from_fn([1, 3, 32, 32], |_, c, y, x| {
            (c * 3 + y + 2 * x) as f64 / 128.0
        });
        let i1 = Tensor::from_fn([1, 3, 32, 32], |_, c, y, x| (x * y + c) as f64 / 1024.0);
        let out = net.forward(&i0, &i1).unwrap();
        let s3 = &out.states[3];
        assert!(s3.mask.data().iter().all(|&m| m == 0.5));
        let (a, b) = (out.pyramid0.level(3), out.pyramid1.level(3));
        for ((&v, &x), &y) in s3.image.data().iter().zip(a.data()).zip(b.data()) {
            assert!((v - 0.5 * (x + y)).abs() < 1e-15);
        }
    }

    #[test]
    fn csm_with_unit_mask_returns_first_warp() {
        let i0 = Tensor::from_fn([1, 3, 4, 4], |_, c, y, x| {
            0.1 * c as f32 + 0.03 * (y * x) as f32
        });
        let i1 = Tensor::from_fn([1, 3, 4, 4], |_, c, y, x| 0.7 - 0.05 * (c + y + x) as f32);
        let flow = Tensor::from_fn([1, 2, 4, 4], |_, c, y, _| 0.3 * (c + y) as f32);
        let zero = Tensor::zeros([1, 2, 4, 4]);
        let r = Tensor::zeros([1, 3, 4, 4]);
        let ones = Tensor::full([1, 1, 4, 4], 1.0);
        let out = csm_apply(&ones, &r, &flow, &zero, &i0, &i1).unwrap();
        assert_eq!(out.to_vec(), backward_warp(&i0, &flow).unwrap().to_vec());
    }
}
