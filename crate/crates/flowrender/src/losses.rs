//! The training objectives: perceptual and style distances over a fixed
//! feature extractor, the cyclic warp reconstruction, the 3D feature-space
//! losses, the inpainting objective, and their weighted total.

use crate::config::ModelConfig;
use crate::datamodel::{composite_foreground, separate_foreground, Frame, Mask, ParamWindow};
use crate::error::{FlowError, Result};
use crate::mapping::{MappingNet, LEAKY_SLOPE};
use crate::nn::{BoundParams, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::transunet::TransUNet;
use crate::warp3d::{FeatureVolume, Warp3d};
use serde::{Deserialize, Serialize};

/// Weights of the seven loss terms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub pw: f64,
    pub cw: f64,
    pub w3d: f64,
    pub f3d: f64,
    pub inp: f64,
    pub pr: f64,
    pub sr: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { pw: 2.5, cw: 2.5, w3d: 100.0, f3d: 100.0, inp: 2.5, pr: 4.0, sr: 1000.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.pw, self.cw, self.w3d, self.f3d, self.inp, self.pr, self.sr];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(FlowError::validation("loss weights must be non-negative".to_string()));
        }
        Ok(())
    }
}

/// The seven scalar loss terms of one training step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossComponents {
    pub pw: f64,
    pub cw: f64,
    pub w3d: f64,
    pub f3d: f64,
    pub inp: f64,
    pub pr: f64,
    pub sr: f64,
}

impl LossComponents {
    pub fn named(&self) -> [(&'static str, f64); 7] {
        [
            ("l_pw", self.pw),
            ("l_cw", self.cw),
            ("l_3dw", self.w3d),
            ("l_3df", self.f3d),
            ("l_inp", self.inp),
            ("l_pr", self.pr),
            ("l_sr", self.sr),
        ]
    }
}

/// Weighted sum of the loss components. Rejects non-finite terms, naming the
/// offender.
pub fn total_loss(c: &LossComponents, w: &LossWeights) -> Result<f64> {
    w.validate()?;
    for (name, value) in c.named() {
        if !value.is_finite() {
            return Err(FlowError::NonFinite { what: format!("loss term {name}") });
        }
    }
    let mut acc = 0.0;
    for (weight, value) in [
        (w.pw, c.pw),
        (w.cw, c.cw),
        (w.w3d, c.w3d),
        (w.f3d, c.f3d),
        (w.inp, c.inp),
        (w.pr, c.pr),
        (w.sr, c.sr),
    ] {
        acc += weight * value;
    }
    Ok(acc)
}

/// One convolution stage of the fixed feature extractor.
#[derive(Clone, Debug)]
pub struct PhiStage {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
}

/// A fixed (non-trained) deterministic stack of convolution stages standing
/// in for a pretrained deep feature extractor. Any stage list can be plugged
/// in through [`PerceptualFeatureExtractor::from_stages`]; the seeded default
/// is a 3-stage net of widths 8/16/32 with strides 1/2/2.
#[derive(Clone, Debug)]
pub struct PerceptualFeatureExtractor {
    stages: Vec<PhiStage>,
}

impl PerceptualFeatureExtractor {
    pub fn seeded(seed: u64) -> Self {
        use rand::{RngExt, SeedableRng};
        let widths = [8usize, 16, 32];
        let strides = [1usize, 2, 2];
        let mut stages = Vec::new();
        let mut in_ch = 3;
        for (i, (&w, &s)) in widths.iter().zip(&strides).enumerate() {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64));
            let fan_in = in_ch * 9;
            let bound = 1.0 / (fan_in as f64).sqrt();
            let n = w * in_ch * 9;
            stages.push(PhiStage {
                weight: Tensor::from_vec(
                    &[w, in_ch, 3, 3],
                    (0..n).map(|_| rng.random_range(-bound..bound)).collect(),
                ),
                bias: Tensor::zeros(&[w]),
                stride: s,
            });
            in_ch = w;
        }
        PerceptualFeatureExtractor { stages }
    }

    pub fn from_config(cfg: &ModelConfig) -> Self {
        Self::seeded(cfg.phi_seed)
    }

    pub fn from_stages(stages: Vec<PhiStage>) -> Result<Self> {
        if stages.is_empty() {
            return Err(FlowError::config("feature extractor needs at least one stage".to_string()));
        }
        Ok(PerceptualFeatureExtractor { stages })
    }

    /// Single pass-through stage: phi(x) = x (on non-negative inputs).
    pub fn identity() -> Self {
        let mut w = Tensor::zeros(&[3, 3, 1, 1]);
        for c in 0..3 {
            w.data_mut()[c * 3 + c] = 1.0;
        }
        PerceptualFeatureExtractor {
            stages: vec![PhiStage { weight: w, bias: Tensor::zeros(&[3]), stride: 1 }],
        }
    }

    pub fn stage_count(&self) -> usize {
        self.stages.len()
    }

    /// Activation maps of every stage, on the tape (weights are constants).
    pub fn forward(&self, tape: &mut Tape, image: Var) -> Vec<Var> {
        let mut acts = Vec::with_capacity(self.stages.len());
        let mut x = image;
        for stage in &self.stages {
            let pad = (stage.weight.shape()[2] - 1) / 2;
            let w = tape.constant(stage.weight.clone());
            let b = tape.constant(stage.bias.clone());
            let c = tape.conv2d(x, w, b, stage.stride, pad);
            x = tape.leaky_relu(c, LEAKY_SLOPE);
            acts.push(x);
        }
        acts
    }

    /// Value-level activation maps.
    pub fn features(&self, image: &Tensor) -> Vec<Tensor> {
        let mut tape = Tape::new();
        let x = tape.constant(image.clone());
        self.forward(&mut tape, x)
            .into_iter()
            .map(|v| tape.value(v).clone())
            .collect()
    }

    /// Pooled per-channel stage means, concatenated; the desk-scale stand-in
    /// embedding for distribution and identity metrics.
    pub fn embed(&self, frame: &Frame) -> Vec<f64> {
        let mut out = Vec::new();
        for act in self.features(frame.pixels()) {
            let c = act.shape()[0];
            let rest = act.numel() / c;
            for ci in 0..c {
                out.push(act.data()[ci * rest..(ci + 1) * rest].iter().sum::<f64>() / rest as f64);
            }
        }
        out
    }

    pub fn embed_dim(&self) -> usize {
        self.stages.iter().map(|s| s.weight.shape()[0]).sum()
    }
}

// ---- tape-level loss builders ----

/// Mean absolute difference.
pub fn l1_t(tape: &mut Tape, a: Var, b: Var) -> Var {
    let d = tape.sub(a, b);
    let d = tape.abs(d);
    tape.mean(d)
}

/// Mean squared difference.
pub fn mse_t(tape: &mut Tape, a: Var, b: Var) -> Var {
    let d = tape.sub(a, b);
    let d = tape.square(d);
    tape.mean(d)
}

/// Sum over stages of the mean absolute activation difference.
pub fn perceptual_t(tape: &mut Tape, phi: &PerceptualFeatureExtractor, a: Var, b: Var) -> Var {
    let fa = phi.forward(tape, a);
    let fb = phi.forward(tape, b);
    let mut acc: Option<Var> = None;
    for (xa, xb) in fa.into_iter().zip(fb) {
        let term = l1_t(tape, xa, xb);
        acc = Some(match acc {
            Some(prev) => tape.add(prev, term),
            None => term,
        });
    }
    acc.expect("at least one stage")
}

/// Sum over stages of the mean absolute Gram-matrix difference.
pub fn style_t(tape: &mut Tape, phi: &PerceptualFeatureExtractor, a: Var, b: Var) -> Var {
    let fa = phi.forward(tape, a);
    let fb = phi.forward(tape, b);
    let mut acc: Option<Var> = None;
    for (xa, xb) in fa.into_iter().zip(fb) {
        let ga = tape.gram(xa);
        let gb = tape.gram(xb);
        let term = l1_t(tape, ga, gb);
        acc = Some(match acc {
            Some(prev) => tape.add(prev, term),
            None => term,
        });
    }
    acc.expect("at least one stage")
}

// ---- value-level operations ----

fn check_frames(a: &Frame, b: &Frame, what: &str) -> Result<()> {
    if a.resolution() != b.resolution() {
        return Err(FlowError::shape(
            what,
            format!("{}", a.resolution()),
            format!("{}", b.resolution()),
        ));
    }
    Ok(())
}

/// L1 distance between activation maps, summed over stages (per-element
/// mean inside each stage).
pub fn perceptual_loss(a: &Frame, b: &Frame, phi: &PerceptualFeatureExtractor) -> Result<f64> {
    check_frames(a, b, "perceptual_loss")?;
    let mut tape = Tape::new();
    let va = tape.constant(a.pixels().clone());
    let vb = tape.constant(b.pixels().clone());
    let loss = perceptual_t(&mut tape, phi, va, vb);
    Ok(tape.scalar_value(loss))
}

/// Per-element mean L1 between two frames.
pub fn l1_image(a: &Frame, b: &Frame) -> Result<f64> {
    check_frames(a, b, "l1_image")?;
    let mut tape = Tape::new();
    let va = tape.constant(a.pixels().clone());
    let vb = tape.constant(b.pixels().clone());
    let loss = l1_t(&mut tape, va, vb);
    Ok(tape.scalar_value(loss))
}

/// Gram matrix of an activation map: `[C, H, W] -> [C, C]`, normalized by
/// `C*H*W`.
pub fn gram_matrix(act: &Tensor) -> Result<Tensor> {
    if act.shape().len() != 3 {
        return Err(FlowError::shape("gram_matrix", "[C, H, W]", format!("{:?}", act.shape())));
    }
    let mut tape = Tape::new();
    let a = tape.constant(act.clone());
    let g = tape.gram(a);
    Ok(tape.value(g).clone())
}

/// Statistical (Gram) distance between two frames under the extractor.
pub fn style_loss(a: &Frame, b: &Frame, phi: &PerceptualFeatureExtractor) -> Result<f64> {
    check_frames(a, b, "style_loss")?;
    let mut tape = Tape::new();
    let va = tape.constant(a.pixels().clone());
    let vb = tape.constant(b.pixels().clone());
    let loss = style_t(&mut tape, phi, va, vb);
    Ok(tape.scalar_value(loss))
}

/// MSE between the warped feature volume and the target's encoded volume.
pub fn warp3d_feature_loss(f_w: &FeatureVolume, t_if: &FeatureVolume) -> Result<f64> {
    if f_w.shape() != t_if.shape() {
        return Err(FlowError::shape(
            "warp3d_feature_loss",
            format!("{:?}", f_w.shape()),
            format!("{:?}", t_if.shape()),
        ));
    }
    let mut tape = Tape::new();
    let a = tape.constant(f_w.tensor().clone());
    let b = tape.constant(t_if.tensor().clone());
    let loss = mse_t(&mut tape, a, b);
    Ok(tape.scalar_value(loss))
}

/// Warp forward with the target motion, feed the warped image back as the
/// new source with the original source's motion, and measure the L1
/// reconstruction error against the original source. Both passes share the
/// same weights.
pub fn cyclic_warp_loss(
    store: &ParamStore,
    cfg: &ModelConfig,
    source_fg: &Frame,
    window_target: &ParamWindow,
    window_source: &ParamWindow,
) -> Result<f64> {
    let mapping = MappingNet::from_config(cfg);
    let warp = Warp3d::new(cfg);
    let mut tape = Tape::new();
    let p = BoundParams::bind_all_constant(&mut tape, store);
    let src = tape.constant(source_fg.pixels().clone());
    let wt = tape.constant(window_target.tensor().clone());
    let ws = tape.constant(window_source.tensor().clone());
    let t = mapping.forward(&mut tape, &p, wt)?;
    let t_s = mapping.forward(&mut tape, &p, ws)?;
    let first = warp.forward(&mut tape, &p, src, t)?;
    let second = warp.forward(&mut tape, &p, first.warped, t_s)?;
    let loss = l1_t(&mut tape, second.warped, src);
    Ok(tape.scalar_value(loss))
}

/// Perceptual distance between the encoder->decoder roundtrip of a frame and
/// the frame itself (no warping applied).
pub fn roundtrip_feature_loss(
    store: &ParamStore,
    cfg: &ModelConfig,
    frame: &Frame,
    phi: &PerceptualFeatureExtractor,
) -> Result<f64> {
    let warp = Warp3d::new(cfg);
    let mut tape = Tape::new();
    let p = BoundParams::bind_all_constant(&mut tape, store);
    let src = tape.constant(frame.pixels().clone());
    let vol = warp.encode(&mut tape, &p, src)?;
    let out = warp.decode(&mut tape, &p, vol)?;
    let loss = perceptual_t(&mut tape, phi, out, src);
    Ok(tape.scalar_value(loss))
}

/// Which foreground gets projected onto the source background for the
/// inpainting objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InpaintPhase {
    /// Project the target's own foreground (pre-training).
    TargetForeground,
    /// Project the refiner's output (end-to-end training).
    RefinerOutput,
}

/// The inpainting objective on one source/target pair: build the composited
/// image with blank regions, inpaint it, and compare perceptually against
/// the full target frame.
pub fn inpainting_loss(
    store: &ParamStore,
    cfg: &ModelConfig,
    source: (&Frame, &Mask),
    target: (&Frame, &Mask),
    window_target: &ParamWindow,
    phi: &PerceptualFeatureExtractor,
    phase: InpaintPhase,
) -> Result<f64> {
    let mapping = MappingNet::from_config(cfg);
    let motion = mapping.map_motion(store, window_target)?;
    let (src_fg, src_bg) = separate_foreground(source.0, source.1)?;
    let (target_fg, _) = separate_foreground(target.0, target.1)?;
    let fg_to_project = match phase {
        InpaintPhase::TargetForeground => target_fg,
        InpaintPhase::RefinerOutput => {
            let warp = Warp3d::new(cfg);
            let (warped, _, _) = warp.warp_frame(store, &src_fg, &motion)?;
            crate::transunet::refine(store, cfg, &src_fg, &warped, &motion)?
        }
    };
    let (composited, _blank) = composite_foreground(&fg_to_project, &src_bg, source.1)?;
    let inpainter = TransUNet::inpainter(cfg);
    let m = if inpainter.adain_enabled { Some(&motion) } else { None };
    let output = inpainter.run(store, composited.pixels(), m)?;
    perceptual_loss(&output, target.0, phi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::synth::make_synthetic_sequence;
    use crate::datamodel::window_from_params;
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_frame(rng: &mut ChaCha8Rng, res: usize) -> Frame {
        Frame::new(Tensor::from_vec(
            &[3, res, res],
            (0..3 * res * res).map(|_| rng.random_range(0.0..1.0)).collect(),
        ))
        .unwrap()
    }

    fn toy_cfg() -> ModelConfig {
        ModelConfig {
            resolution: 32,
            vol_base: 4,
            motion_dim: 8,
            mapping_layers: 1,
            window_radius: 2,
            unet_depth: 2,
            unet_base: 4,
            ..Default::default()
        }
    }

    #[test]
    fn perceptual_loss_identity_is_exactly_zero() {
        let phi = PerceptualFeatureExtractor::seeded(7);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_frame(&mut rng, 16);
        assert_eq!(perceptual_loss(&a, &a, &phi).unwrap(), 0.0);
    }

    #[test]
    fn perceptual_loss_is_symmetric() {
        let phi = PerceptualFeatureExtractor::seeded(7);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random_frame(&mut rng, 16);
        let b = random_frame(&mut rng, 16);
        assert_eq!(perceptual_loss(&a, &b, &phi).unwrap(), perceptual_loss(&b, &a, &phi).unwrap());
    }

    #[test]
    fn perceptual_loss_identity_stage_constant_offset() {
        // phi = identity, |a - b| = 0.5 everywhere -> loss 0.5
        let phi = PerceptualFeatureExtractor::identity();
        let a = Frame::new(Tensor::full(&[3, 16, 16], 0.75)).unwrap();
        let b = Frame::new(Tensor::full(&[3, 16, 16], 0.25)).unwrap();
        let loss = perceptual_loss(&a, &b, &phi).unwrap();
        assert!((loss - 0.5).abs() < 1e-12);
    }

    #[test]
    fn perceptual_loss_rejects_size_mismatch() {
        let phi = PerceptualFeatureExtractor::seeded(7);
        let a = Frame::zeros(16);
        let b = Frame::zeros(32);
        assert!(perceptual_loss(&a, &b, &phi).is_err());
    }

    #[test]
    fn l1_identity_offset_and_triangle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_frame(&mut rng, 16);
        assert_eq!(l1_image(&a, &a).unwrap(), 0.0);
        let lo = Frame::new(Tensor::full(&[3, 16, 16], 0.25)).unwrap();
        let hi = Frame::new(Tensor::full(&[3, 16, 16], 0.5)).unwrap();
        assert!((l1_image(&lo, &hi).unwrap() - 0.25).abs() < 1e-12);
        for _ in 0..20 {
            let x = random_frame(&mut rng, 8);
            let y = random_frame(&mut rng, 8);
            let z = random_frame(&mut rng, 8);
            let xy = l1_image(&x, &y).unwrap();
            let yz = l1_image(&y, &z).unwrap();
            let xz = l1_image(&x, &z).unwrap();
            assert!(xz <= xy + yz + 1e-12);
        }
    }

    #[test]
    fn gram_matches_hand_oracle() {
        // act = 2 channels of a 1x2 map: [[1,2],[3,4]]
        let act = Tensor::from_vec(&[2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let g = gram_matrix(&act).unwrap();
        assert_eq!(g.shape(), &[2, 2]);
        let want = [1.25, 2.75, 2.75, 6.25]; // A A^T / (2*1*2)
        for (got, want) in g.data().iter().zip(want) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn gram_of_zeros_is_zero_and_random_is_symmetric_psd() {
        let zeros = gram_matrix(&Tensor::zeros(&[3, 4, 4])).unwrap();
        assert!(zeros.data().iter().all(|v| *v == 0.0));
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let act = Tensor::from_vec(
                &[3, 4, 4],
                (0..48).map(|_| rng.random_range(-1.0..1.0)).collect(),
            );
            let g = gram_matrix(&act).unwrap();
            for i in 0..3 {
                for j in 0..3 {
                    assert!((g.data()[i * 3 + j] - g.data()[j * 3 + i]).abs() < 1e-12);
                }
            }
            // PSD: x^T G x >= 0 for random probes
            for _ in 0..5 {
                let x: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
                let mut quad = 0.0;
                for i in 0..3 {
                    for j in 0..3 {
                        quad += x[i] * g.data()[i * 3 + j] * x[j];
                    }
                }
                assert!(quad >= -1e-12, "indefinite Gram: {quad}");
            }
        }
    }

    #[test]
    fn style_loss_identity_and_spatial_permutation_invariance() {
        let phi = PerceptualFeatureExtractor::identity();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random_frame(&mut rng, 16);
        let b = random_frame(&mut rng, 16);
        assert_eq!(style_loss(&a, &a, &phi).unwrap(), 0.0);
        let base = style_loss(&a, &b, &phi).unwrap();
        // permute pixels identically in both frames: Gram unchanged
        let mut perm: Vec<usize> = (0..256).collect();
        for i in (1..perm.len()).rev() {
            perm.swap(i, rng.random_range(0..i + 1));
        }
        let permute = |f: &Frame| {
            let d = f.pixels().data();
            let mut out = vec![0.0; d.len()];
            for c in 0..3 {
                for (dst, &src) in perm.iter().enumerate() {
                    out[c * 256 + dst] = d[c * 256 + src];
                }
            }
            Frame::new(Tensor::from_vec(&[3, 16, 16], out)).unwrap()
        };
        let shuffled = style_loss(&permute(&a), &permute(&b), &phi).unwrap();
        assert!((base - shuffled).abs() < 1e-9, "{base} vs {shuffled}");
    }

    #[test]
    fn style_loss_two_channel_loop_oracle() {
        // direct check of sum_j mean|G(a) - G(b)| on 2-channel activations
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = Tensor::from_vec(&[2, 2, 2], (0..8).map(|_| rng.random_range(-1.0..1.0)).collect());
        let b = Tensor::from_vec(&[2, 2, 2], (0..8).map(|_| rng.random_range(-1.0..1.0)).collect());
        let loop_gram = |t: &Tensor| -> Vec<f64> {
            let mut g = vec![0.0; 4];
            for i in 0..2 {
                for j in 0..2 {
                    let mut acc = 0.0;
                    for p in 0..4 {
                        acc += t.data()[i * 4 + p] * t.data()[j * 4 + p];
                    }
                    g[i * 2 + j] = acc / 8.0; // C*H*W = 2*2*2
                }
            }
            g
        };
        let (ga, gb) = (loop_gram(&a), loop_gram(&b));
        let want: f64 =
            ga.iter().zip(&gb).map(|(x, y)| (x - y).abs()).sum::<f64>() / 4.0;
        let got_a = gram_matrix(&a).unwrap();
        let got_b = gram_matrix(&b).unwrap();
        let got: f64 = got_a
            .data()
            .iter()
            .zip(got_b.data())
            .map(|(x, y)| (x - y).abs())
            .sum::<f64>()
            / 4.0;
        assert!((got - want).abs() < 1e-8);
    }

    #[test]
    fn total_loss_zeroes_units_and_linearity() {
        let w = LossWeights::default();
        assert_eq!(total_loss(&LossComponents::default(), &w).unwrap(), 0.0);
        let ones = LossComponents { pw: 1.0, cw: 1.0, w3d: 1.0, f3d: 1.0, inp: 1.0, pr: 1.0, sr: 1.0 };
        assert_eq!(total_loss(&ones, &w).unwrap(), 1211.5);
        // doubling one component adds exactly lambda * value
        let mut c = ones;
        c.pr = 2.0;
        assert_eq!(total_loss(&c, &w).unwrap(), 1211.5 + 4.0);
    }

    #[test]
    fn total_loss_names_non_finite_component() {
        let w = LossWeights::default();
        let mut c = LossComponents::default();
        c.w3d = f64::NAN;
        let err = total_loss(&c, &w).unwrap_err();
        assert!(err.to_string().contains("l_3dw"), "{err}");
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn warp_feature_loss_identity_constant_and_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let v = FeatureVolume::new(Tensor::from_vec(
            &[2, 2, 2, 2],
            (0..16).map(|_| rng.random_range(-1.0..1.0)).collect(),
        ))
        .unwrap();
        assert_eq!(warp3d_feature_loss(&v, &v).unwrap(), 0.0);
        let shifted = FeatureVolume::new(v.tensor().map(|x| x + 2.0)).unwrap();
        assert!((warp3d_feature_loss(&v, &shifted).unwrap() - 4.0).abs() < 1e-12);
        let u = FeatureVolume::new(Tensor::from_vec(
            &[2, 2, 2, 2],
            (0..16).map(|_| rng.random_range(-1.0..1.0)).collect(),
        ))
        .unwrap();
        let mut want = 0.0;
        for i in 0..16 {
            let d = v.tensor().data()[i] - u.tensor().data()[i];
            want += d * d;
        }
        want /= 16.0;
        assert!((warp3d_feature_loss(&v, &u).unwrap() - want).abs() < 1e-10);
        let bad = FeatureVolume::new(Tensor::zeros(&[2, 2, 2, 4])).unwrap();
        assert!(warp3d_feature_loss(&v, &bad).is_err());
    }

    #[test]
    fn cyclic_loss_with_zero_flow_stub_is_roundtrip_error_independent_of_motion() {
        let mut cfg = toy_cfg();
        cfg.zero_flow_stub = true;
        let warp = Warp3d::new(&cfg);
        let mapping = MappingNet::from_config(&cfg);
        let mut specs = warp.param_specs();
        specs.extend(mapping.param_specs());
        let mut store = ParamStore::init(&specs, 8).unwrap();
        store.randomize(9, 0.2);
        let seq = make_synthetic_sequence(3, 6, 32).unwrap();
        let (src_fg, _) = separate_foreground(&seq.frames[0], &seq.masks[0]).unwrap();
        let w_a = window_from_params(&seq.params, 3, 2).unwrap();
        let w_b = window_from_params(&seq.params, 1, 2).unwrap();
        // distinct motion windows give the same loss under the stub
        let l_ab = cyclic_warp_loss(&store, &cfg, &src_fg, &w_a, &w_b).unwrap();
        let l_ba = cyclic_warp_loss(&store, &cfg, &src_fg, &w_b, &w_a).unwrap();
        assert!((l_ab - l_ba).abs() < 1e-6, "{l_ab} vs {l_ba}");
        // and equals the double encoder-decoder roundtrip L1
        let once = warp
            .decode_volume(&store, &warp.encode_frame(&store, &src_fg).unwrap())
            .unwrap();
        let twice = warp
            .decode_volume(&store, &warp.encode_frame(&store, &once).unwrap())
            .unwrap();
        let want = l1_image(&twice, &src_fg).unwrap();
        assert!((l_ab - want).abs() < 1e-9, "{l_ab} vs {want}");
    }

    #[test]
    fn cyclic_loss_nonnegative_finite_for_random_weights() {
        let cfg = toy_cfg();
        let warp = Warp3d::new(&cfg);
        let mapping = MappingNet::from_config(&cfg);
        let mut specs = warp.param_specs();
        specs.extend(mapping.param_specs());
        let mut store = ParamStore::init(&specs, 10).unwrap();
        store.randomize(11, 0.2);
        let seq = make_synthetic_sequence(4, 6, 32).unwrap();
        let (src_fg, _) = separate_foreground(&seq.frames[2], &seq.masks[2]).unwrap();
        let w_t = window_from_params(&seq.params, 4, 2).unwrap();
        let w_s = window_from_params(&seq.params, 2, 2).unwrap();
        let l = cyclic_warp_loss(&store, &cfg, &src_fg, &w_t, &w_s).unwrap();
        assert!(l.is_finite() && l >= 0.0);
    }

    #[test]
    fn roundtrip_loss_equals_perceptual_of_decoded_and_is_nonnegative() {
        let cfg = toy_cfg();
        let warp = Warp3d::new(&cfg);
        let mut store = ParamStore::init(&warp.param_specs(), 12).unwrap();
        store.randomize(13, 0.2);
        let phi = PerceptualFeatureExtractor::seeded(cfg.phi_seed);
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let frame = random_frame(&mut rng, 32);
        let loss = roundtrip_feature_loss(&store, &cfg, &frame, &phi).unwrap();
        assert!(loss >= 0.0 && loss.is_finite());
        let decoded = warp
            .decode_volume(&store, &warp.encode_frame(&store, &frame).unwrap())
            .unwrap();
        let direct = perceptual_loss(&decoded, &frame, &phi).unwrap();
        assert!((loss - direct).abs() < 1e-12);
        // the identity condition of the perceptual distance itself
        assert_eq!(perceptual_loss(&frame, &frame, &phi).unwrap(), 0.0);
    }

    #[test]
    fn inpainting_loss_degenerate_pair_reduces_to_direct_path() {
        let cfg = toy_cfg();
        let mapping = MappingNet::from_config(&cfg);
        let inpainter = TransUNet::inpainter(&cfg);
        let mut specs = mapping.param_specs();
        specs.extend(inpainter.param_specs());
        let mut store = ParamStore::init(&specs, 15).unwrap();
        store.randomize(16, 0.2);
        let phi = PerceptualFeatureExtractor::seeded(cfg.phi_seed);
        let seq = make_synthetic_sequence(5, 6, 32).unwrap();
        // source == target: no translation, blank mask must be empty
        let i = 2;
        let (frame, mask) = (&seq.frames[i], &seq.masks[i]);
        let window = window_from_params(&seq.params, i, 2).unwrap();
        let loss = inpainting_loss(
            &store,
            &cfg,
            (frame, mask),
            (frame, mask),
            &window,
            &phi,
            InpaintPhase::TargetForeground,
        )
        .unwrap();
        // direct path: composite own foreground on own background, inpaint
        let motion = mapping.map_motion(&store, &window).unwrap();
        let (fg, bg) = separate_foreground(frame, mask).unwrap();
        let (comp, blank) = composite_foreground(&fg, &bg, mask).unwrap();
        assert!(blank.alpha().data().iter().all(|v| *v == 0.0));
        let out = crate::transunet::inpaint(&store, &cfg, &comp, &motion).unwrap();
        let want = perceptual_loss(&out, frame, &phi).unwrap();
        assert!((loss - want).abs() < 1e-12);
        assert!(loss >= 0.0 && loss.is_finite());
    }

    #[test]
    fn roundtrip_loss_halves_under_200_optimization_steps() {
        // optimization smoke: train encoder+decoder on a single frame
        let cfg = toy_cfg();
        let warp = Warp3d::new(&cfg);
        let mut store = ParamStore::init(&warp.param_specs(), 17).unwrap();
        let phi = PerceptualFeatureExtractor::seeded(cfg.phi_seed);
        let seq = make_synthetic_sequence(6, 4, 32).unwrap();
        let frame = &seq.frames[0];
        let initial = roundtrip_feature_loss(&store, &cfg, frame, &phi).unwrap();
        let mut adam = crate::training::Adam::new(1e-3, 0.9, 0.999, 1e-8);
        for _ in 0..200 {
            let mut tape = Tape::new();
            let p = BoundParams::bind(&mut tape, &store, |n| {
                n.starts_with("enc3d/") || n.starts_with("dec3d/")
            });
            let src = tape.constant(frame.pixels().clone());
            let vol = warp.encode(&mut tape, &p, src).unwrap();
            let out = warp.decode(&mut tape, &p, vol).unwrap();
            let loss = perceptual_t(&mut tape, &phi, out, src);
            let grads = tape.backward(loss);
            adam.apply(&mut store, &p, &grads).unwrap();
        }
        let final_loss = roundtrip_feature_loss(&store, &cfg, frame, &phi).unwrap();
        assert!(
            final_loss < 0.5 * initial,
            "roundtrip loss {initial} only reached {final_loss} after 200 steps"
        );
    }
}
