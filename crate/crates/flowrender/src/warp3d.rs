//! The 3D warping stage: a 3D feature encoder lifts the source foreground
//! into a `[C, D, H', W']` appearance volume, a motion-conditioned flow
//! network predicts a dense per-voxel displacement field, the volume is
//! warped by trilinear resampling, and a 3D feature decoder projects the
//! warped volume back to an RGB image.
//!
//! Motion enters the flow network only, via 3D AdaIN after every
//! convolution; the feature encoder/decoder pair is motion-free so it can be
//! regularized as a plain autoencoder.

use crate::config::ModelConfig;
use crate::datamodel::Frame;
use crate::error::{FlowError, Result};
use crate::mapping::{MotionVector, LEAKY_SLOPE};
use crate::nn::{adain, adain_specs, conv_specs, tconv_specs, BoundParams, ParamSpec, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// 4-axis appearance tensor `[C, D, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureVolume {
    values: Tensor,
}

impl FeatureVolume {
    pub fn new(values: Tensor) -> Result<Self> {
        if values.shape().len() != 4 || values.shape().iter().any(|&d| d == 0) {
            return Err(FlowError::shape("feature volume", "[C, D, H, W]", format!("{:?}", values.shape())));
        }
        values.validate_finite("feature volume")?;
        Ok(FeatureVolume { values })
    }

    pub fn tensor(&self) -> &Tensor {
        &self.values
    }

    pub fn shape(&self) -> &[usize] {
        self.values.shape()
    }
}

/// Dense per-voxel displacement field `[3, D, H, W]` in normalized
/// coordinates: each axis of the volume spans [-1, 1], and values are
/// tanh-bounded into [-1, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField3D {
    disp: Tensor,
}

impl FlowField3D {
    pub fn new(disp: Tensor) -> Result<Self> {
        if disp.shape().len() != 4 || disp.shape()[0] != 3 {
            return Err(FlowError::shape("flow field", "[3, D, H, W]", format!("{:?}", disp.shape())));
        }
        disp.validate_finite("flow field")?;
        if !disp.data().iter().all(|v| (-1.0..=1.0).contains(v)) {
            return Err(FlowError::validation("flow displacements outside [-1, 1]".to_string()));
        }
        Ok(FlowField3D { disp })
    }

    pub fn zeros_like(vol: &FeatureVolume) -> Self {
        let s = vol.shape();
        FlowField3D { disp: Tensor::zeros(&[3, s[1], s[2], s[3]]) }
    }

    pub fn tensor(&self) -> &Tensor {
        &self.disp
    }
}

/// Per-channel AdaIN scale and bias predicted from a motion vector.
#[derive(Clone, Debug)]
pub struct Adain3dParams {
    pub scale: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Adain3dParams {
    /// `affine_w [2C, D_T]`, `affine_b [2C]` applied to the motion vector;
    /// the first C outputs are scales, the last C are biases.
    pub fn from_motion(motion: &MotionVector, affine_w: &Tensor, affine_b: &Tensor) -> Result<Self> {
        let two_c = affine_w.shape()[0];
        if two_c % 2 != 0
            || affine_w.shape() != [two_c, motion.dim()]
            || affine_b.shape() != [two_c]
        {
            return Err(FlowError::shape(
                "adain affine",
                format!("[2C, {}] / [2C]", motion.dim()),
                format!("{:?} / {:?}", affine_w.shape(), affine_b.shape()),
            ));
        }
        let c = two_c / 2;
        let mut style = affine_b.data().to_vec();
        for (row, s) in style.iter_mut().enumerate() {
            for (col, m) in motion.tensor().data().iter().enumerate() {
                *s += affine_w.data()[row * motion.dim() + col] * m;
            }
        }
        Ok(Adain3dParams { scale: style[..c].to_vec(), bias: style[c..].to_vec() })
    }
}

/// Value-level 3D AdaIN: normalize each channel over (D, H, W), then apply
/// the motion-predicted scale and bias.
pub fn adain3d(
    x: &FeatureVolume,
    motion: &MotionVector,
    affine_w: &Tensor,
    affine_b: &Tensor,
) -> Result<FeatureVolume> {
    let c = x.shape()[0];
    if affine_w.shape()[0] != 2 * c {
        return Err(FlowError::shape(
            "adain3d",
            format!("affine output 2C = {}", 2 * c),
            format!("{}", affine_w.shape()[0]),
        ));
    }
    let mut tape = Tape::new();
    let xv = tape.constant(x.tensor().clone());
    let t = tape.constant(motion.tensor().clone());
    let w = tape.constant(affine_w.clone());
    let b = tape.constant(affine_b.clone());
    let out = adain(&mut tape, xv, t, w, b);
    FeatureVolume::new(tape.value(out).clone())
}

/// Trilinear warp of a feature volume by a dense 3D flow field.
pub fn warp_volume(vol: &FeatureVolume, flow: &FlowField3D) -> Result<FeatureVolume> {
    let vs = vol.shape();
    let fs = flow.tensor().shape();
    if fs[1..] != vs[1..] {
        return Err(FlowError::shape("warp_volume", format!("{:?}", &vs[1..]), format!("{:?}", &fs[1..])));
    }
    let mut tape = Tape::new();
    let v = tape.constant(vol.tensor().clone());
    let d = tape.constant(flow.tensor().clone());
    let out = tape.grid_sample3d(v, d);
    FeatureVolume::new(tape.value(out).clone())
}

/// Everything the 3D warping stage returns for loss computation.
pub struct WarpOutputs {
    pub warped: Var,
    pub volume: Var,
    pub flow: Var,
}

/// The three networks of the 3D warping stage, parameterized by the model
/// config. Weights live in a [`ParamStore`] under the `enc3d/`, `flow/`, and
/// `dec3d/` prefixes.
#[derive(Clone, Debug)]
pub struct Warp3d {
    pub cfg: ModelConfig,
}

impl Warp3d {
    pub fn new(cfg: &ModelConfig) -> Self {
        Warp3d { cfg: cfg.clone() }
    }

    fn base(&self) -> usize {
        self.cfg.vol_base
    }

    fn stem_specs(&self, prefix: &str) -> Vec<ParamSpec> {
        let b = self.base();
        let mut specs = Vec::new();
        specs.extend(conv_specs(&format!("{prefix}/stem/c0"), &[4 * b, 3, 3, 3]));
        specs.extend(conv_specs(
            &format!("{prefix}/stem/c1"),
            &[b * self.cfg.vol_depth, 4 * b, 3, 3],
        ));
        specs
    }

    pub fn encoder_specs(&self) -> Vec<ParamSpec> {
        let b = self.base();
        let mut specs = self.stem_specs("enc3d");
        let ins = [b, 2 * b, 4 * b];
        let outs = [2 * b, 4 * b, 4 * b];
        for i in 0..3 {
            specs.extend(conv_specs(&format!("enc3d/blk{i}/c0"), &[outs[i], ins[i], 3, 3, 3]));
            specs.extend(conv_specs(&format!("enc3d/blk{i}/c1"), &[outs[i], outs[i], 3, 3, 3]));
            specs.extend(conv_specs(&format!("enc3d/blk{i}/skip"), &[outs[i], ins[i], 1, 1, 1]));
        }
        specs
    }

    pub fn decoder_specs(&self) -> Vec<ParamSpec> {
        let b = self.base();
        let wide = 8 * b;
        let mut specs = Vec::new();
        specs.extend(conv_specs("dec3d/proj", &[wide, 4 * b * self.cfg.vol_depth, 3, 3]));
        for i in 0..3 {
            specs.extend(conv_specs(&format!("dec3d/res{i}/c0"), &[wide, wide, 3, 3]));
            specs.extend(conv_specs(&format!("dec3d/res{i}/c1"), &[wide, wide, 3, 3]));
        }
        let up_in = [wide, 4 * b, 2 * b, b, b];
        let up_out = [4 * b, 2 * b, b, b, b];
        for i in 0..5 {
            specs.extend(conv_specs(&format!("dec3d/up{i}"), &[up_out[i], up_in[i], 3, 3]));
        }
        specs.extend(conv_specs("dec3d/out", &[3, b, 3, 3]));
        specs
    }

    pub fn flow_specs(&self) -> Vec<ParamSpec> {
        let b = self.base();
        let d_t = self.cfg.motion_dim;
        let mut specs = self.stem_specs("flow");
        let ins = [b, 2 * b, 4 * b];
        let outs = [2 * b, 4 * b, 4 * b];
        for i in 0..3 {
            specs.extend(conv_specs(&format!("flow/enc{i}/c0"), &[outs[i], ins[i], 3, 3, 3]));
            specs.extend(adain_specs(&format!("flow/enc{i}/c0"), outs[i], d_t));
            specs.extend(conv_specs(&format!("flow/enc{i}/c1"), &[outs[i], outs[i], 3, 3, 3]));
            specs.extend(adain_specs(&format!("flow/enc{i}/c1"), outs[i], d_t));
        }
        // decoder: transposed conv doubling depth, then conv over the
        // concatenation with the spatially pooled encoder skip
        let t_in = [4 * b, 4 * b, 2 * b];
        let t_out = [4 * b, 2 * b, b];
        let skip_ch = [4 * b, 2 * b, b];
        for i in 0..3 {
            specs.extend(tconv_specs(&format!("flow/dec{i}/t"), &[t_in[i], t_out[i], 2, 1, 1]));
            specs.extend(adain_specs(&format!("flow/dec{i}/t"), t_out[i], d_t));
            specs.extend(conv_specs(
                &format!("flow/dec{i}/c"),
                &[t_out[i], t_out[i] + skip_ch[i], 3, 3, 3],
            ));
            specs.extend(adain_specs(&format!("flow/dec{i}/c"), t_out[i], d_t));
        }
        specs.extend(conv_specs("flow/head", &[3, b, 1, 1, 1]));
        specs
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut specs = self.encoder_specs();
        specs.extend(self.flow_specs());
        specs.extend(self.decoder_specs());
        specs
    }

    fn check_input(&self, tape: &Tape, src: Var) -> Result<()> {
        let s = tape.shape_of(src);
        let r = self.cfg.resolution;
        if s != [3, r, r] {
            return Err(FlowError::shape("warp3d input", format!("[3, {r}, {r}]"), format!("{s:?}")));
        }
        Ok(())
    }

    /// Shared stem: two stride-2 2D convolutions, then reshape the channel
    /// axis into (channels, depth).
    fn stem(&self, tape: &mut Tape, p: &BoundParams, prefix: &str, src: Var) -> Var {
        let x = tape.conv2d(src, p.var(&format!("{prefix}/stem/c0/w")), p.var(&format!("{prefix}/stem/c0/b")), 2, 1);
        let x = tape.leaky_relu(x, LEAKY_SLOPE);
        let x = tape.conv2d(x, p.var(&format!("{prefix}/stem/c1/w")), p.var(&format!("{prefix}/stem/c1/b")), 2, 1);
        let x = tape.leaky_relu(x, LEAKY_SLOPE);
        let s = tape.shape_of(x);
        let b = self.base();
        tape.reshape(x, &[b, self.cfg.vol_depth, s[1], s[2]])
    }

    /// 3D feature encoder: stem plus three ConvDown3D blocks (two 3D convs
    /// with an additive skip; spatial stride 2, depth constant).
    pub fn encode(&self, tape: &mut Tape, p: &BoundParams, src: Var) -> Result<Var> {
        self.check_input(tape, src)?;
        let mut x = self.stem(tape, p, "enc3d", src);
        for i in 0..3 {
            let c0 = tape.conv3d(
                x,
                p.var(&format!("enc3d/blk{i}/c0/w")),
                p.var(&format!("enc3d/blk{i}/c0/b")),
                (1, 2, 2),
                (1, 1, 1),
            );
            let a0 = tape.leaky_relu(c0, LEAKY_SLOPE);
            let c1 = tape.conv3d(
                a0,
                p.var(&format!("enc3d/blk{i}/c1/w")),
                p.var(&format!("enc3d/blk{i}/c1/b")),
                (1, 1, 1),
                (1, 1, 1),
            );
            let skip = tape.conv3d(
                x,
                p.var(&format!("enc3d/blk{i}/skip/w")),
                p.var(&format!("enc3d/blk{i}/skip/b")),
                (1, 2, 2),
                (0, 0, 0),
            );
            let sum = tape.add(c1, skip);
            x = tape.leaky_relu(sum, LEAKY_SLOPE);
        }
        Ok(x)
    }

    /// Dense 3D flow prediction: an AdaIN-conditioned 3D autoencoder over the
    /// same channel/depth reshaping as the feature encoder. Encoder blocks
    /// halve depth and space; decoder blocks double depth back while staying
    /// at the warped volume's spatial size, concatenating spatially pooled
    /// encoder skips. Output is tanh-bounded.
    pub fn flow(&self, tape: &mut Tape, p: &BoundParams, src: Var, motion: Var) -> Result<Var> {
        self.check_input(tape, src)?;
        if self.cfg.zero_flow_stub {
            let [_, d, h, w] = self.cfg.flow_shape();
            return Ok(tape.constant(Tensor::zeros(&[3, d, h, w])));
        }
        let ada = |tape: &mut Tape, p: &BoundParams, x: Var, site: &str| {
            let out = adain(
                tape,
                x,
                motion,
                p.var(&format!("{site}/ada/w")),
                p.var(&format!("{site}/ada/b")),
            );
            tape.leaky_relu(out, LEAKY_SLOPE)
        };
        let s0 = self.stem(tape, p, "flow", src);
        let mut skips = vec![s0];
        let mut x = s0;
        for i in 0..3 {
            let c0 = tape.conv3d(
                x,
                p.var(&format!("flow/enc{i}/c0/w")),
                p.var(&format!("flow/enc{i}/c0/b")),
                (2, 2, 2),
                (1, 1, 1),
            );
            let a0 = ada(tape, p, c0, &format!("flow/enc{i}/c0"));
            let c1 = tape.conv3d(
                a0,
                p.var(&format!("flow/enc{i}/c1/w")),
                p.var(&format!("flow/enc{i}/c1/b")),
                (1, 1, 1),
                (1, 1, 1),
            );
            x = ada(tape, p, c1, &format!("flow/enc{i}/c1"));
            skips.push(x);
        }
        // skips[3] is the bottleneck; decode against skips[2], [1], [0]
        let target_spatial = self.cfg.vol_spatial();
        for i in 0..3 {
            let t = tape.conv_transpose3d(
                x,
                p.var(&format!("flow/dec{i}/t/w")),
                p.var(&format!("flow/dec{i}/t/b")),
                (2, 1, 1),
            );
            let t = ada(tape, p, t, &format!("flow/dec{i}/t"));
            let skip = skips[2 - i];
            let skip_spatial = tape.shape_of(skip)[2];
            let pooled = if skip_spatial == target_spatial {
                skip
            } else {
                tape.avgpool3d_spatial(skip, skip_spatial / target_spatial)
            };
            let cat = tape.concat_first(t, pooled);
            let c = tape.conv3d(
                cat,
                p.var(&format!("flow/dec{i}/c/w")),
                p.var(&format!("flow/dec{i}/c/b")),
                (1, 1, 1),
                (1, 1, 1),
            );
            x = ada(tape, p, c, &format!("flow/dec{i}/c"));
        }
        let head = tape.conv3d(x, p.var("flow/head/w"), p.var("flow/head/b"), (1, 1, 1), (0, 0, 0));
        Ok(tape.tanh(head))
    }

    /// 3D feature decoder: merge (channels, depth) back into 2D channels,
    /// run residual blocks at constant width, then upsample 32x to RGB.
    pub fn decode(&self, tape: &mut Tape, p: &BoundParams, vol: Var) -> Result<Var> {
        let s = tape.shape_of(vol);
        let want = self.cfg.volume_shape();
        if s != want {
            return Err(FlowError::shape("decode3d input", format!("{want:?}"), format!("{s:?}")));
        }
        let merged = tape.reshape(vol, &[s[0] * s[1], s[2], s[3]]);
        let x = tape.conv2d(merged, p.var("dec3d/proj/w"), p.var("dec3d/proj/b"), 1, 1);
        let mut x = tape.leaky_relu(x, LEAKY_SLOPE);
        for i in 0..3 {
            let c0 = tape.conv2d(x, p.var(&format!("dec3d/res{i}/c0/w")), p.var(&format!("dec3d/res{i}/c0/b")), 1, 1);
            let a0 = tape.leaky_relu(c0, LEAKY_SLOPE);
            let c1 = tape.conv2d(a0, p.var(&format!("dec3d/res{i}/c1/w")), p.var(&format!("dec3d/res{i}/c1/b")), 1, 1);
            let sum = tape.add(x, c1);
            x = tape.leaky_relu(sum, LEAKY_SLOPE);
        }
        for i in 0..5 {
            let up = tape.upsample2d_nearest(x);
            let c = tape.conv2d(up, p.var(&format!("dec3d/up{i}/w")), p.var(&format!("dec3d/up{i}/b")), 1, 1);
            x = tape.leaky_relu(c, LEAKY_SLOPE);
        }
        let out = tape.conv2d(x, p.var("dec3d/out/w"), p.var("dec3d/out/b"), 1, 1);
        Ok(tape.sigmoid(out))
    }

    /// Full warping stage: encode, predict flow, warp, decode. Returns the
    /// warped image together with the warped volume and the flow for the
    /// loss suite.
    pub fn forward(&self, tape: &mut Tape, p: &BoundParams, src: Var, motion: Var) -> Result<WarpOutputs> {
        let vol = self.encode(tape, p, src)?;
        let flow = self.flow(tape, p, src, motion)?;
        let warped_vol = tape.grid_sample3d(vol, flow);
        let warped = self.decode(tape, p, warped_vol)?;
        Ok(WarpOutputs { warped, volume: warped_vol, flow })
    }

    // ---- value-level entry points ----

    pub fn encode_frame(&self, store: &ParamStore, frame: &Frame) -> Result<FeatureVolume> {
        let mut tape = Tape::new();
        let p = BoundParams::bind_all_constant(&mut tape, store);
        let src = tape.constant(frame.pixels().clone());
        let vol = self.encode(&mut tape, &p, src)?;
        FeatureVolume::new(tape.value(vol).clone())
    }

    pub fn predict_flow_field(
        &self,
        store: &ParamStore,
        frame: &Frame,
        motion: &MotionVector,
    ) -> Result<FlowField3D> {
        let mut tape = Tape::new();
        let p = BoundParams::bind_all_constant(&mut tape, store);
        let src = tape.constant(frame.pixels().clone());
        let t = tape.constant(motion.tensor().clone());
        let flow = self.flow(&mut tape, &p, src, t)?;
        FlowField3D::new(tape.value(flow).clone())
    }

    pub fn decode_volume(&self, store: &ParamStore, vol: &FeatureVolume) -> Result<Frame> {
        let mut tape = Tape::new();
        let p = BoundParams::bind_all_constant(&mut tape, store);
        let v = tape.constant(vol.tensor().clone());
        let out = self.decode(&mut tape, &p, v)?;
        Frame::new(tape.value(out).clone())
    }

    /// Value-level [`Warp3d::forward`].
    pub fn warp_frame(
        &self,
        store: &ParamStore,
        frame: &Frame,
        motion: &MotionVector,
    ) -> Result<(Frame, FeatureVolume, FlowField3D)> {
        let mut tape = Tape::new();
        let p = BoundParams::bind_all_constant(&mut tape, store);
        let src = tape.constant(frame.pixels().clone());
        let t = tape.constant(motion.tensor().clone());
        let out = self.forward(&mut tape, &p, src, t)?;
        Ok((
            Frame::new(tape.value(out.warped).clone())?,
            FeatureVolume::new(tape.value(out.volume).clone())?,
            FlowField3D::new(tape.value(out.flow).clone())?,
        ))
    }
}
