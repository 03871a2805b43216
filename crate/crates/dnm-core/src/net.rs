//! Miniature dual encoder-decoder networks producing four-scale disparity
//! pyramids.
//!
//! Each network halves the spatial extents `encoder_depth` times with
//! 4x4/stride-2 convolutions, then decodes back up with nearest-neighbor
//! upsampling, channel-concatenated skip connections and 3x3 convolutions.
//! The last four decoder stages each feed a 3x3 head whose sigmoid output,
//! scaled by `d_max_frac`, is the disparity map for that scale.
//!
//! A [`DualModel`] holds two structurally identical networks with
//! independent parameters: the left network consumes left images, the right
//! network right images. For the twelve-loss variant each network emits two
//! channels; channel 0 is the disparity of the network's own view
//! (`d_ll` for the left network, `d_rr` for the right one) and channel 1 is
//! the cross-view map. Inference reads channel 0 unless asked otherwise.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::Error;
use crate::rng::{derive_seed, Rng};
use crate::stereo::Disparity;
use crate::tape::{Tape, TensorId};
use crate::tensor::Tensor;
use crate::Result;

/// Default upper bound of the disparity head, as a fraction of image width.
pub const DEFAULT_D_MAX_FRAC: f64 = 0.3;

/// Which dual-network variant a model implements.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Dnm6,
    Dnm12,
}

impl ModelKind {
    pub fn out_channels(self) -> usize {
        match self {
            ModelKind::Dnm6 => 1,
            ModelKind::Dnm12 => 2,
        }
    }

    pub fn tag(self) -> u32 {
        match self {
            ModelKind::Dnm6 => 6,
            ModelKind::Dnm12 => 12,
        }
    }

    pub fn from_tag(tag: u32) -> Result<Self> {
        match tag {
            6 => Ok(ModelKind::Dnm6),
            12 => Ok(ModelKind::Dnm12),
            other => Err(Error::InvalidConfig(format!(
                "unknown model kind tag {other}, expected 6 or 12"
            ))),
        }
    }
}

/// Which stereo view a prediction is for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum View {
    Left,
    Right,
}

/// Channel selection for twelve-loss inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DispChannel {
    /// Channel 0: the disparity of the network's own view.
    #[default]
    SameView,
    /// Channel 1: the cross-view disparity.
    CrossView,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NetworkConfig {
    pub input_channels: usize,
    pub base_filters: usize,
    pub encoder_depth: usize,
    pub out_channels: usize,
    pub d_max_frac: f64,
    pub seed: u64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            input_channels: 3,
            base_filters: 8,
            encoder_depth: 4,
            out_channels: 1,
            d_max_frac: DEFAULT_D_MAX_FRAC,
            seed: 0,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.encoder_depth < 4 {
            return Err(Error::InvalidConfig(format!(
                "encoder_depth must be at least 4 so four output scales exist, got {}",
                self.encoder_depth
            )));
        }
        if self.out_channels != 1 && self.out_channels != 2 {
            return Err(Error::InvalidConfig(format!(
                "out_channels must be 1 or 2, got {}",
                self.out_channels
            )));
        }
        if self.input_channels != 1 && self.input_channels != 3 {
            return Err(Error::InvalidConfig(format!(
                "input_channels must be 1 or 3, got {}",
                self.input_channels
            )));
        }
        if self.base_filters == 0 {
            return Err(Error::InvalidConfig(String::from(
                "base_filters must be positive",
            )));
        }
        if !(self.d_max_frac > 0.0 && self.d_max_frac < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "d_max_frac must lie in (0, 1), got {}",
                self.d_max_frac
            )));
        }
        Ok(())
    }

    /// `(in_channels, out_channels, kernel)` of every layer, in parameter
    /// order: encoder stages, decoder stages, then heads. Encoder layers run
    /// at stride 2 / padding 1, everything else at stride 1 / padding 1.
    fn layer_plan(&self) -> Vec<LayerPlan> {
        let d = self.encoder_depth;
        let f = self.base_filters;
        let enc_out = |k: usize| f << (k - 1); // stage k in 1..=d
        let mut plan = Vec::new();
        for k in 1..=d {
            let cin = if k == 1 { self.input_channels } else { enc_out(k - 1) };
            plan.push(LayerPlan {
                name: format!("enc{k}"),
                cin,
                cout: enc_out(k),
                kernel: 4,
            });
        }
        // Decoder stages by output resolution level m = d-1 .. 0 (extents
        // h / 2^m); previous feature channels start at the bottleneck.
        // Stages below a disparity head also consume the upsampled coarser
        // disparity, which lets finer scales inherit the coarse solution.
        let mut prev = enc_out(d);
        let mut dec_out = Vec::new();
        for m in (0..d).rev() {
            let skip = if m >= 1 { enc_out(m) } else { self.input_channels };
            let updisp = if m < 3 { self.out_channels } else { 0 };
            let cout = if m >= 1 { enc_out(m) } else { f };
            plan.push(LayerPlan {
                name: format!("dec{m}"),
                cin: prev + skip + updisp,
                cout,
                kernel: 3,
            });
            dec_out.push((m, cout));
            prev = cout;
        }
        // One head per output scale s = 1..4, attached at level m = s-1.
        for s in (1..=4).rev() {
            let m = s - 1;
            let cin = dec_out
                .iter()
                .find(|(level, _)| *level == m)
                .map(|(_, c)| *c)
                .expect("encoder_depth >= 4 guarantees the level exists");
            plan.push(LayerPlan {
                name: format!("head{s}"),
                cin,
                cout: self.out_channels,
                kernel: 3,
            });
        }
        plan
    }

    /// Total trainable parameter count of one network.
    pub fn param_count(&self) -> usize {
        self.layer_plan()
            .iter()
            .map(|l| l.cout * l.cin * l.kernel * l.kernel + l.cout)
            .sum()
    }
}

struct LayerPlan {
    name: String,
    cin: usize,
    cout: usize,
    kernel: usize,
}

/// One convolution's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub name: String,
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Ordered parameters of one network: encoder stages, decoder stages, heads.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    pub encoder: Vec<ConvLayer>,
    pub decoder: Vec<ConvLayer>,
    pub heads: Vec<ConvLayer>,
}

impl NetworkParams {
    fn layers(&self) -> impl Iterator<Item = &ConvLayer> {
        self.encoder
            .iter()
            .chain(self.decoder.iter())
            .chain(self.heads.iter())
    }

    fn layers_mut(&mut self) -> impl Iterator<Item = &mut ConvLayer> {
        self.encoder
            .iter_mut()
            .chain(self.decoder.iter_mut())
            .chain(self.heads.iter_mut())
    }

    /// Flat `(name, tensor)` view in deterministic order, weights before
    /// biases per layer. This is the order used by the optimizer state and
    /// the checkpoint format.
    pub fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for layer in self.layers() {
            out.push((format!("{}.weight", layer.name), &layer.weight));
            out.push((format!("{}.bias", layer.name), &layer.bias));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for layer in self.layers_mut() {
            out.push((format!("{}.weight", layer.name), &mut layer.weight));
            out.push((format!("{}.bias", layer.name), &mut layer.bias));
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.layers()
            .map(|l| l.weight.numel() + l.bias.numel())
            .sum()
    }
}

/// Seeded Glorot-uniform initialization: kernels uniform in
/// `±sqrt(6 / (fan_in + fan_out))`, biases zero.
pub fn init_params(cfg: &NetworkConfig) -> Result<NetworkParams> {
    cfg.validate()?;
    let mut rng = Rng::new(cfg.seed);
    let d = cfg.encoder_depth;
    let mut encoder = Vec::new();
    let mut decoder = Vec::new();
    let mut heads = Vec::new();
    for (i, plan) in cfg.layer_plan().into_iter().enumerate() {
        let fan_in = plan.cin * plan.kernel * plan.kernel;
        let fan_out = plan.cout * plan.kernel * plan.kernel;
        let limit = libm::sqrt(6.0 / (fan_in + fan_out) as f64);
        let n = plan.cout * plan.cin * plan.kernel * plan.kernel;
        let values: Vec<f64> = (0..n).map(|_| rng.range(-limit, limit)).collect();
        let weight = Tensor::new(&[plan.cout, plan.cin, plan.kernel, plan.kernel], values)?;
        let bias = Tensor::zeros(&[plan.cout])?;
        let layer = ConvLayer {
            name: plan.name,
            weight,
            bias,
        };
        if i < d {
            encoder.push(layer);
        } else if i < 2 * d {
            decoder.push(layer);
        } else {
            heads.push(layer);
        }
    }
    Ok(NetworkParams {
        encoder,
        decoder,
        heads,
    })
}

/// Tape handles for one network's parameters, in `NetworkParams` order.
pub struct BoundNetwork {
    pub encoder: Vec<(TensorId, TensorId)>,
    pub decoder: Vec<(TensorId, TensorId)>,
    pub heads: Vec<(TensorId, TensorId)>,
}

impl BoundNetwork {
    /// Rebuild the segmented view from a flat id list in `tensors()` order.
    pub fn from_flat(encoder_depth: usize, ids: &[TensorId]) -> Result<Self> {
        let expected = 2 * (2 * encoder_depth + 4);
        if ids.len() != expected {
            return Err(Error::LengthMismatch {
                expected,
                got: ids.len(),
            });
        }
        let pair = |k: usize| (ids[2 * k], ids[2 * k + 1]);
        let encoder = (0..encoder_depth).map(pair).collect();
        let decoder = (encoder_depth..2 * encoder_depth).map(pair).collect();
        let heads = (2 * encoder_depth..2 * encoder_depth + 4).map(pair).collect();
        Ok(BoundNetwork {
            encoder,
            decoder,
            heads,
        })
    }

    pub fn flat_ids(&self) -> Vec<TensorId> {
        self.encoder
            .iter()
            .chain(self.decoder.iter())
            .chain(self.heads.iter())
            .flat_map(|(w, b)| [*w, *b])
            .collect()
    }
}

/// Put every parameter of `params` on the tape as leaves.
pub fn bind_network(tape: &mut Tape, params: &NetworkParams, requires_grad: bool) -> BoundNetwork {
    let mut ids = Vec::new();
    for (_, tensor) in params.tensors() {
        ids.push(tape.leaf(tensor.clone().with_requires_grad(requires_grad)));
    }
    BoundNetwork::from_flat(params.encoder.len(), &ids).expect("lengths match by construction")
}

/// Disparity maps at scales 1..4 (full resolution down to 1/8), each with
/// `out_channels` channels and values strictly inside `(0, d_max_frac)`.
pub type DisparityScaleIds = [TensorId; 4];

/// Run one network on an image whose extents divide `2^encoder_depth`.
pub fn forward_network(
    tape: &mut Tape,
    cfg: &NetworkConfig,
    net: &BoundNetwork,
    image: TensorId,
) -> Result<DisparityScaleIds> {
    let (_, c, h, w) = tape.tensor(image).dims4()?;
    if c != cfg.input_channels {
        return Err(Error::BadShape {
            op: "forward",
            shape: tape.shape(image).to_vec(),
            reason: "input channel count does not match the network",
        });
    }
    let factor = 1usize << cfg.encoder_depth;
    if h % factor != 0 || w % factor != 0 {
        return Err(Error::BadShape {
            op: "forward",
            shape: tape.shape(image).to_vec(),
            reason: "extents must divide 2^encoder_depth",
        });
    }

    let d = cfg.encoder_depth;
    let mut enc_feats = Vec::with_capacity(d);
    let mut x = image;
    for (wid, bid) in &net.encoder {
        let conv = tape.conv2d(x, *wid, Some(*bid), 2, 1)?;
        x = tape.elu(conv)?;
        enc_feats.push(x);
    }

    let mut scales = [None; 4];
    let mut feat = *enc_feats.last().expect("depth >= 4");
    let mut prev_disp: Option<TensorId> = None;
    for (stage, m) in (0..d).rev().enumerate() {
        let up = tape.upsample2(feat)?;
        let skip = if m >= 1 { enc_feats[m - 1] } else { image };
        let mut cat = tape.concat_c(up, skip)?;
        if let Some(disp) = prev_disp {
            let up_disp = tape.upsample2(disp)?;
            cat = tape.concat_c(cat, up_disp)?;
        }
        let (wid, bid) = net.decoder[stage];
        let conv = tape.conv2d(cat, wid, Some(bid), 1, 1)?;
        feat = tape.elu(conv)?;
        if m <= 3 {
            let scale = m + 1; // head for scale s sits at level m = s-1
            let (hw, hb) = net.heads[4 - scale];
            let raw = tape.conv2d(feat, hw, Some(hb), 1, 1)?;
            let sig = tape.sigmoid(raw)?;
            let disp = tape.scale(sig, cfg.d_max_frac)?;
            scales[scale - 1] = Some(disp);
            prev_disp = Some(disp);
        }
    }
    Ok([
        scales[0].expect("scale 1"),
        scales[1].expect("scale 2"),
        scales[2].expect("scale 3"),
        scales[3].expect("scale 4"),
    ])
}

/// Two independently parameterized networks sharing one configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct DualModel {
    pub kind: ModelKind,
    pub cfg: NetworkConfig,
    pub left: NetworkParams,
    pub right: NetworkParams,
}

impl DualModel {
    /// Initialize both networks from `cfg.seed`, with distinct derived
    /// streams so the two sides never share weights.
    pub fn new(kind: ModelKind, mut cfg: NetworkConfig) -> Result<Self> {
        cfg.out_channels = kind.out_channels();
        cfg.validate()?;
        let left = init_params(&NetworkConfig {
            seed: derive_seed(cfg.seed, 1),
            ..cfg
        })?;
        let right = init_params(&NetworkConfig {
            seed: derive_seed(cfg.seed, 2),
            ..cfg
        })?;
        Ok(DualModel {
            kind,
            cfg,
            left,
            right,
        })
    }

    pub fn params(&self, view: View) -> &NetworkParams {
        match view {
            View::Left => &self.left,
            View::Right => &self.right,
        }
    }

    /// Total parameter count over both networks.
    pub fn param_count(&self) -> usize {
        self.left.param_count() + self.right.param_count()
    }
}

/// Full-scale disparity prediction from a single image, channel 0 for
/// twelve-loss models.
pub fn predict_disparity(model: &DualModel, image: &Tensor, view: View) -> Result<Disparity> {
    predict_disparity_channel(model, image, view, DispChannel::SameView)
}

/// Like [`predict_disparity`] but with an explicit channel choice.
pub fn predict_disparity_channel(
    model: &DualModel,
    image: &Tensor,
    view: View,
    channel: DispChannel,
) -> Result<Disparity> {
    let chan = match (model.kind, channel) {
        (_, DispChannel::SameView) => 0,
        (ModelKind::Dnm12, DispChannel::CrossView) => 1,
        (ModelKind::Dnm6, DispChannel::CrossView) => {
            return Err(Error::InvalidConfig(String::from(
                "six-loss models have no cross-view channel",
            )))
        }
    };
    let mut tape = Tape::new();
    let img = tape.leaf(image.clone());
    let bound = bind_network(&mut tape, model.params(view), false);
    let scales = forward_network(&mut tape, &model.cfg, &bound, img)?;
    let full = if model.cfg.out_channels == 1 {
        scales[0]
    } else {
        tape.slice_c(scales[0], chan, 1)?
    };
    Disparity::new(tape.tensor(full).clone().with_requires_grad(false))
}
