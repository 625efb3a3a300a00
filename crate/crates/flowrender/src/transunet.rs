//! TransUNet: a UNet that injects the target motion vector through AdaIN
//! after every decoder convolution. One architecture, two weight sets — the
//! refiner consumes the source and warped images (6 channels) and the
//! inpainter consumes the composited image (3 channels).

use crate::config::ModelConfig;
use crate::datamodel::Frame;
use crate::error::{FlowError, Result};
use crate::mapping::{MotionVector, LEAKY_SLOPE};
use crate::nn::{adain, adain_specs, conv_specs, BoundParams, ParamSpec, ParamStore};
use crate::tape::{Tape, Var};

#[derive(Clone, Debug)]
pub struct TransUNet {
    /// Weight-name prefix: `refiner` or `inpainter`.
    pub prefix: String,
    pub in_channels: usize,
    pub depth: usize,
    pub base: usize,
    pub motion_dim: usize,
    /// AdaIN after encoder convolutions too (decoder-only by default).
    pub adain_encoder: bool,
    /// Whether this instance conditions on motion at all.
    pub adain_enabled: bool,
}

impl TransUNet {
    pub fn refiner(cfg: &ModelConfig) -> Self {
        TransUNet {
            prefix: "refiner".to_string(),
            in_channels: 6,
            depth: cfg.unet_depth,
            base: cfg.unet_base,
            motion_dim: cfg.motion_dim,
            adain_encoder: cfg.adain_in_encoder,
            adain_enabled: true,
        }
    }

    pub fn inpainter(cfg: &ModelConfig) -> Self {
        TransUNet {
            prefix: "inpainter".to_string(),
            in_channels: 3,
            depth: cfg.unet_depth,
            base: cfg.unet_base,
            motion_dim: cfg.motion_dim,
            adain_encoder: cfg.adain_in_encoder,
            adain_enabled: cfg.adain_in_inpainter,
        }
    }

    fn width(&self, level: usize) -> usize {
        self.base << level.min(2)
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut specs = Vec::new();
        let p = &self.prefix;
        for l in 0..self.depth {
            let in_ch = if l == 0 { self.in_channels } else { self.width(l - 1) };
            let w = self.width(l);
            specs.extend(conv_specs(&format!("{p}/enc{l}/c0"), &[w, in_ch, 3, 3]));
            specs.extend(conv_specs(&format!("{p}/enc{l}/c1"), &[w, w, 3, 3]));
            if self.adain_enabled && self.adain_encoder {
                specs.extend(adain_specs(&format!("{p}/enc{l}/c0"), w, self.motion_dim));
                specs.extend(adain_specs(&format!("{p}/enc{l}/c1"), w, self.motion_dim));
            }
        }
        let bw = self.width(self.depth - 1);
        specs.extend(conv_specs(&format!("{p}/bottom/c0"), &[bw, bw, 3, 3]));
        specs.extend(conv_specs(&format!("{p}/bottom/c1"), &[bw, bw, 3, 3]));
        for l in (0..self.depth).rev() {
            let up_ch = if l == self.depth - 1 { bw } else { self.width(l + 1) };
            let w = self.width(l);
            specs.extend(conv_specs(&format!("{p}/dec{l}/c0"), &[w, up_ch + w, 3, 3]));
            specs.extend(conv_specs(&format!("{p}/dec{l}/c1"), &[w, w, 3, 3]));
            if self.adain_enabled {
                specs.extend(adain_specs(&format!("{p}/dec{l}/c0"), w, self.motion_dim));
                specs.extend(adain_specs(&format!("{p}/dec{l}/c1"), w, self.motion_dim));
            }
        }
        specs.extend(conv_specs(&format!("{p}/out"), &[3, self.width(0), 3, 3]));
        specs
    }

    /// Number of AdaIN sites in this instance (the default layout has
    /// exactly two per decoder level and none in the encoder).
    pub fn adain_site_count(&self) -> usize {
        self.param_specs()
            .iter()
            .filter(|s| s.name.ends_with("/ada/w"))
            .count()
    }

    fn conv_site(
        &self,
        tape: &mut Tape,
        p: &BoundParams,
        x: Var,
        site: &str,
        motion: Option<Var>,
        with_adain: bool,
    ) -> Var {
        let c = tape.conv2d(x, p.var(&format!("{site}/w")), p.var(&format!("{site}/b")), 1, 1);
        let c = if with_adain {
            let motion = motion.expect("motion vector required for AdaIN site");
            adain(tape, c, motion, p.var(&format!("{site}/ada/w")), p.var(&format!("{site}/ada/b")))
        } else {
            c
        };
        tape.leaky_relu(c, LEAKY_SLOPE)
    }

    /// Encoder (double conv + max pool per level), bottom, decoder (nearest
    /// upsample + skip concat + double conv with AdaIN), output conv with
    /// logistic squashing. Preserves the spatial resolution.
    pub fn forward(&self, tape: &mut Tape, p: &BoundParams, x: Var, motion: Option<Var>) -> Result<Var> {
        let shape = tape.shape_of(x);
        if shape.len() != 3 || shape[0] != self.in_channels || shape[1] != shape[2] {
            return Err(FlowError::shape(
                format!("{} input", self.prefix),
                format!("[{}, N, N]", self.in_channels),
                format!("{shape:?}"),
            ));
        }
        if shape[1] % (1 << self.depth) != 0 {
            return Err(FlowError::config(format!(
                "{} resolution {} not divisible by 2^{}",
                self.prefix, shape[1], self.depth
            )));
        }
        if self.adain_enabled && motion.is_none() {
            return Err(FlowError::config(format!("{} needs a motion vector", self.prefix)));
        }
        let pfx = self.prefix.clone();
        let enc_ada = self.adain_enabled && self.adain_encoder;
        let mut skips = Vec::with_capacity(self.depth);
        let mut h = x;
        for l in 0..self.depth {
            h = self.conv_site(tape, p, h, &format!("{pfx}/enc{l}/c0"), motion, enc_ada);
            h = self.conv_site(tape, p, h, &format!("{pfx}/enc{l}/c1"), motion, enc_ada);
            skips.push(h);
            h = tape.maxpool2d(h);
        }
        h = self.conv_site(tape, p, h, &format!("{pfx}/bottom/c0"), motion, false);
        h = self.conv_site(tape, p, h, &format!("{pfx}/bottom/c1"), motion, false);
        for l in (0..self.depth).rev() {
            h = tape.upsample2d_nearest(h);
            h = tape.concat_first(h, skips[l]);
            h = self.conv_site(tape, p, h, &format!("{pfx}/dec{l}/c0"), motion, self.adain_enabled);
            h = self.conv_site(tape, p, h, &format!("{pfx}/dec{l}/c1"), motion, self.adain_enabled);
        }
        let out = tape.conv2d(h, p.var(&format!("{pfx}/out/w")), p.var(&format!("{pfx}/out/b")), 1, 1);
        Ok(tape.sigmoid(out))
    }

    /// Value-level forward over stacked input channels.
    pub fn run(
        &self,
        store: &ParamStore,
        input: &crate::tensor::Tensor,
        motion: Option<&MotionVector>,
    ) -> Result<Frame> {
        let mut tape = Tape::new();
        let p = BoundParams::bind_all_constant(&mut tape, store);
        let x = tape.constant(input.clone());
        let t = motion.map(|m| tape.constant(m.tensor().clone()));
        let out = self.forward(&mut tape, &p, x, t)?;
        Frame::new(tape.value(out).clone())
    }
}

/// Refinement: concatenate source foreground and warped image, run the
/// refiner TransUNet conditioned on the motion vector.
pub fn refine(
    store: &ParamStore,
    cfg: &ModelConfig,
    src_fg: &Frame,
    warped: &Frame,
    motion: &MotionVector,
) -> Result<Frame> {
    if src_fg.resolution() != warped.resolution() {
        return Err(FlowError::shape(
            "refine",
            format!("{}", src_fg.resolution()),
            format!("{}", warped.resolution()),
        ));
    }
    let net = TransUNet::refiner(cfg);
    let mut tape = Tape::new();
    let p = BoundParams::bind_all_constant(&mut tape, store);
    let a = tape.constant(src_fg.pixels().clone());
    let b = tape.constant(warped.pixels().clone());
    let cat = tape.concat_first(a, b);
    let t = tape.constant(motion.tensor().clone());
    let out = net.forward(&mut tape, &p, cat, Some(t))?;
    Frame::new(tape.value(out).clone())
}

/// Inpainting: fill the blank regions of a composited frame.
pub fn inpaint(
    store: &ParamStore,
    cfg: &ModelConfig,
    composited: &Frame,
    motion: &MotionVector,
) -> Result<Frame> {
    let net = TransUNet::inpainter(cfg);
    let m = if net.adain_enabled { Some(motion) } else { None };
    net.run(store, composited.pixels(), m)
}
