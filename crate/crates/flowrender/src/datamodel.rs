//! Core data types: motion parameters, frames and masks, parameter windows,
//! the linear face-shape model, foreground/background arithmetic, and the
//! sequence container the trainer and evaluator consume.

pub mod io;
pub mod synth;

use crate::error::{FlowError, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

pub const BETA_LEN: usize = 64;
pub const ALPHA_LEN: usize = 80;
pub const PARAM_LEN: usize = BETA_LEN + 9;

/// Luminance threshold above which a refined-foreground pixel counts as
/// covered when compositing back onto the source background.
pub const FG_LUMA_EPS: f64 = 1e-3;

/// Target-motion description of one frame: 64 expression coefficients,
/// yaw/pitch/roll, translation, and crop parameters — 73 values total.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MotionParams {
    pub beta: Vec<f64>,
    pub rot: [f64; 3],
    pub trans: [f64; 3],
    pub crop: [f64; 3],
}

impl MotionParams {
    pub fn zeros() -> Self {
        MotionParams { beta: vec![0.0; BETA_LEN], rot: [0.0; 3], trans: [0.0; 3], crop: [0.0; 3] }
    }

    pub fn validate(&self) -> Result<()> {
        if self.beta.len() != BETA_LEN {
            return Err(FlowError::validation(format!(
                "expected {} expression coefficients, got {}",
                BETA_LEN,
                self.beta.len()
            )));
        }
        let finite = self.beta.iter().all(|v| v.is_finite())
            && self.rot.iter().all(|v| v.is_finite())
            && self.trans.iter().all(|v| v.is_finite())
            && self.crop.iter().all(|v| v.is_finite());
        if !finite {
            return Err(FlowError::NonFinite { what: "motion parameters".to_string() });
        }
        Ok(())
    }
}

/// Concatenate in the fixed order `[beta | rot | trans | crop]`.
pub fn flatten_params(p: &MotionParams) -> Result<Vec<f64>> {
    p.validate()?;
    let mut out = Vec::with_capacity(PARAM_LEN);
    out.extend_from_slice(&p.beta);
    out.extend_from_slice(&p.rot);
    out.extend_from_slice(&p.trans);
    out.extend_from_slice(&p.crop);
    Ok(out)
}

/// Inverse of [`flatten_params`].
pub fn unflatten_params(v: &[f64]) -> Result<MotionParams> {
    if v.len() != PARAM_LEN {
        return Err(FlowError::validation(format!(
            "expected {} flattened coefficients, got {}",
            PARAM_LEN,
            v.len()
        )));
    }
    let p = MotionParams {
        beta: v[..BETA_LEN].to_vec(),
        rot: [v[BETA_LEN], v[BETA_LEN + 1], v[BETA_LEN + 2]],
        trans: [v[BETA_LEN + 3], v[BETA_LEN + 4], v[BETA_LEN + 5]],
        crop: [v[BETA_LEN + 6], v[BETA_LEN + 7], v[BETA_LEN + 8]],
    };
    p.validate()?;
    Ok(p)
}

/// Linear face-shape model: `S = mean + id_basis * alpha + exp_basis * beta`.
#[derive(Clone, Debug)]
pub struct ShapeBasis {
    /// `[V, 3]`
    pub mean_shape: Tensor,
    /// `[V, 3, 80]`
    pub id_basis: Tensor,
    /// `[V, 3, 64]`
    pub exp_basis: Tensor,
}

impl ShapeBasis {
    pub fn vertex_count(&self) -> usize {
        self.mean_shape.shape()[0]
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.vertex_count();
        if self.mean_shape.shape() != [v, 3]
            || self.id_basis.shape() != [v, 3, ALPHA_LEN]
            || self.exp_basis.shape() != [v, 3, BETA_LEN]
        {
            return Err(FlowError::shape(
                "shape basis",
                format!("[{v},3] / [{v},3,{ALPHA_LEN}] / [{v},3,{BETA_LEN}]"),
                format!(
                    "{:?} / {:?} / {:?}",
                    self.mean_shape.shape(),
                    self.id_basis.shape(),
                    self.exp_basis.shape()
                ),
            ));
        }
        Ok(())
    }

    /// Deterministic synthetic basis for tests and the toy dataset.
    pub fn synthetic(seed: u64, vertices: usize) -> Self {
        use rand::{RngExt, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut fill = |shape: &[usize]| {
            let n: usize = shape.iter().product();
            Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
        };
        ShapeBasis {
            mean_shape: fill(&[vertices, 3]),
            id_basis: fill(&[vertices, 3, ALPHA_LEN]),
            exp_basis: fill(&[vertices, 3, BETA_LEN]),
        }
    }
}

/// `S = mean + id_basis * alpha + exp_basis * beta`, per vertex.
pub fn reconstruct_shape(basis: &ShapeBasis, alpha: &[f64], beta: &[f64]) -> Result<Tensor> {
    basis.validate()?;
    if alpha.len() != ALPHA_LEN || beta.len() != BETA_LEN {
        return Err(FlowError::validation(format!(
            "coefficient lengths ({}, {}) do not match basis ({ALPHA_LEN}, {BETA_LEN})",
            alpha.len(),
            beta.len()
        )));
    }
    let v = basis.vertex_count();
    let mut out = basis.mean_shape.clone();
    let od = out.data_mut();
    let idb = basis.id_basis.data();
    let exb = basis.exp_basis.data();
    for vi in 0..v {
        for ax in 0..3 {
            let mut acc = 0.0;
            let id_row = (vi * 3 + ax) * ALPHA_LEN;
            for (k, a) in alpha.iter().enumerate() {
                acc += idb[id_row + k] * a;
            }
            let ex_row = (vi * 3 + ax) * BETA_LEN;
            for (k, b) in beta.iter().enumerate() {
                acc += exb[ex_row + k] * b;
            }
            od[vi * 3 + ax] += acc;
        }
    }
    Ok(out)
}

/// RGB image with values in `[0, 1]`, stored `[3, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pixels: Tensor,
}

impl Frame {
    pub fn new(pixels: Tensor) -> Result<Self> {
        let s = pixels.shape().to_vec();
        if s.len() != 3 || s[0] != 3 || s[1] != s[2] || !s[1].is_power_of_two() {
            return Err(FlowError::shape("frame", "[3, N, N] with N a power of two", format!("{s:?}")));
        }
        if !pixels.data().iter().all(|v| v.is_finite() && (-1e-9..=1.0 + 1e-9).contains(v)) {
            return Err(FlowError::validation("frame pixels outside [0, 1]".to_string()));
        }
        Ok(Frame { pixels })
    }

    /// Build a frame from arbitrary finite values by clamping into `[0, 1]`.
    pub fn from_tensor_clamped(t: Tensor) -> Result<Self> {
        t.validate_finite("frame pixels")?;
        Frame::new(t.map(|v| v.clamp(0.0, 1.0)))
    }

    pub fn zeros(resolution: usize) -> Self {
        Frame { pixels: Tensor::zeros(&[3, resolution, resolution]) }
    }

    pub fn resolution(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn pixels(&self) -> &Tensor {
        &self.pixels
    }

    pub fn into_tensor(self) -> Tensor {
        self.pixels
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        let r = self.resolution();
        self.pixels.data()[(c * r + y) * r + x]
    }

    /// Rec. 601 luminance, `[1, H, W]`.
    pub fn luminance(&self) -> Tensor {
        let r = self.resolution();
        let d = self.pixels.data();
        let hw = r * r;
        let mut out = vec![0.0; hw];
        for i in 0..hw {
            out[i] = 0.299 * d[i] + 0.587 * d[hw + i] + 0.114 * d[2 * hw + i];
        }
        Tensor::from_vec(&[1, r, r], out)
    }
}

/// Soft foreground alpha in `[0, 1]`, stored `[1, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    alpha: Tensor,
}

impl Mask {
    pub fn new(alpha: Tensor) -> Result<Self> {
        let s = alpha.shape().to_vec();
        if s.len() != 3 || s[0] != 1 || s[1] != s[2] {
            return Err(FlowError::shape("mask", "[1, N, N]", format!("{s:?}")));
        }
        if !alpha.data().iter().all(|v| v.is_finite() && (-1e-9..=1.0 + 1e-9).contains(v)) {
            return Err(FlowError::validation("mask alpha outside [0, 1]".to_string()));
        }
        Ok(Mask { alpha })
    }

    pub fn full(resolution: usize, value: f64) -> Self {
        Mask { alpha: Tensor::full(&[1, resolution, resolution], value) }
    }

    pub fn resolution(&self) -> usize {
        self.alpha.shape()[1]
    }

    pub fn alpha(&self) -> &Tensor {
        &self.alpha
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.alpha.data()[y * self.resolution() + x]
    }

    /// Mask centroid in pixel coordinates (x, y); centre of the image when empty.
    pub fn centroid(&self) -> (f64, f64) {
        let r = self.resolution();
        let mut sx = 0.0;
        let mut sy = 0.0;
        let mut total = 0.0;
        for y in 0..r {
            for x in 0..r {
                let a = self.alpha.data()[y * r + x];
                sx += a * x as f64;
                sy += a * y as f64;
                total += a;
            }
        }
        if total <= 0.0 {
            let c = (r as f64 - 1.0) / 2.0;
            (c, c)
        } else {
            (sx / total, sy / total)
        }
    }
}

fn check_same_resolution(frame_res: usize, mask_res: usize, what: &str) -> Result<()> {
    if frame_res != mask_res {
        return Err(FlowError::shape(what, format!("{frame_res}"), format!("{mask_res}")));
    }
    Ok(())
}

/// Split a frame into masked foreground and the complementary background.
/// `fg + bg` reproduces the frame to floating-point roundoff.
pub fn separate_foreground(frame: &Frame, mask: &Mask) -> Result<(Frame, Frame)> {
    check_same_resolution(frame.resolution(), mask.resolution(), "separate_foreground")?;
    let r = frame.resolution();
    let hw = r * r;
    let fd = frame.pixels().data();
    let md = mask.alpha().data();
    let mut fg = vec![0.0; 3 * hw];
    let mut bg = vec![0.0; 3 * hw];
    for c in 0..3 {
        for i in 0..hw {
            let f = fd[c * hw + i];
            let v = f * md[i];
            fg[c * hw + i] = v;
            bg[c * hw + i] = f - v;
        }
    }
    Ok((
        Frame::new(Tensor::from_vec(&[3, r, r], fg))?,
        Frame::new(Tensor::from_vec(&[3, r, r], bg))?,
    ))
}

/// Project a refined foreground back onto the source background.
///
/// The refined foreground's own extent is recovered by thresholding its
/// luminance at [`FG_LUMA_EPS`]. Pixels the source foreground used to cover
/// but the new foreground does not are "blank": they are zeroed in the
/// composite and reported in the returned mask (binarized at 0.5) so the
/// inpainting stage knows what to fill.
pub fn composite_foreground(
    refined_fg: &Frame,
    src_bg: &Frame,
    src_mask: &Mask,
) -> Result<(Frame, Mask)> {
    check_same_resolution(refined_fg.resolution(), src_bg.resolution(), "composite_foreground")?;
    check_same_resolution(refined_fg.resolution(), src_mask.resolution(), "composite_foreground")?;
    let r = refined_fg.resolution();
    let hw = r * r;
    let luma = refined_fg.luminance();
    let rd = refined_fg.pixels().data();
    let bd = src_bg.pixels().data();
    let md = src_mask.alpha().data();
    let mut comp = vec![0.0; 3 * hw];
    let mut blank = vec![0.0; hw];
    for i in 0..hw {
        let new_fg = luma.data()[i] > FG_LUMA_EPS;
        let is_blank = !new_fg && md[i] > 0.5;
        blank[i] = if is_blank { 1.0 } else { 0.0 };
        for c in 0..3 {
            let v = if new_fg {
                rd[c * hw + i]
            } else if is_blank {
                0.0
            } else {
                bd[c * hw + i] * (1.0 - md[i])
            };
            comp[c * hw + i] = v;
        }
    }
    Ok((
        Frame::new(Tensor::from_vec(&[3, r, r], comp))?,
        Mask::new(Tensor::from_vec(&[1, r, r], blank))?,
    ))
}

/// A `73 x (2k+1)` matrix whose columns are flattened motion parameters of
/// consecutive frames.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamWindow {
    data: Tensor,
}

impl ParamWindow {
    pub fn from_tensor(data: Tensor) -> Result<Self> {
        let s = data.shape().to_vec();
        if s.len() != 2 || s[0] != PARAM_LEN || s[1] % 2 == 0 {
            return Err(FlowError::shape(
                "param window",
                format!("[{PARAM_LEN}, odd]"),
                format!("{s:?}"),
            ));
        }
        Ok(ParamWindow { data })
    }

    pub fn columns(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }
}

/// Build the parameter window of radius `k` around frame `i`, clamping
/// out-of-range indices to the sequence ends so the window always holds
/// `2k+1` columns.
pub fn make_window(seq: &SequenceDataset, i: usize, k: usize) -> Result<ParamWindow> {
    if seq.params.is_empty() {
        return Err(FlowError::validation("window over empty sequence".to_string()));
    }
    if i >= seq.params.len() {
        return Err(FlowError::validation(format!(
            "frame index {i} out of range 0..{}",
            seq.params.len()
        )));
    }
    window_from_params(&seq.params, i, k)
}

/// [`make_window`] over a bare parameter list.
pub fn window_from_params(params: &[MotionParams], i: usize, k: usize) -> Result<ParamWindow> {
    if params.is_empty() {
        return Err(FlowError::validation("window over empty sequence".to_string()));
    }
    let n = params.len();
    let cols = 2 * k + 1;
    let mut data = vec![0.0; PARAM_LEN * cols];
    for (col, off) in (-(k as isize)..=k as isize).enumerate() {
        let j = (i as isize + off).clamp(0, n as isize - 1) as usize;
        let flat = flatten_params(&params[j])?;
        for (row, v) in flat.iter().enumerate() {
            data[row * cols + col] = *v;
        }
    }
    ParamWindow::from_tensor(Tensor::from_vec(&[PARAM_LEN, cols], data))
}

/// One video sequence: frames, masks, ground-truth motion parameters, and
/// the identity coefficients shared by all frames.
#[derive(Clone, Debug)]
pub struct SequenceDataset {
    pub id: String,
    pub frames: Vec<Frame>,
    pub masks: Vec<Mask>,
    pub params: Vec<MotionParams>,
    pub alpha: Vec<f64>,
}

impl SequenceDataset {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn resolution(&self) -> usize {
        self.frames.first().map(|f| f.resolution()).unwrap_or(0)
    }

    /// Counts equal, identity length right, parameters finite. Sequence
    /// length is unconstrained here: full-scale corpora run 64..=1024 frames,
    /// toy fixtures are shorter.
    pub fn validate(&self) -> Result<()> {
        if self.frames.is_empty() {
            return Err(FlowError::validation(format!("sequence {} has no frames", self.id)));
        }
        if self.frames.len() != self.masks.len() || self.frames.len() != self.params.len() {
            return Err(FlowError::validation(format!(
                "sequence {}: {} frames, {} masks, {} params",
                self.id,
                self.frames.len(),
                self.masks.len(),
                self.params.len()
            )));
        }
        if self.alpha.len() != ALPHA_LEN {
            return Err(FlowError::validation(format!(
                "sequence {}: identity has {} coefficients, expected {ALPHA_LEN}",
                self.id,
                self.alpha.len()
            )));
        }
        let res = self.resolution();
        for (i, (f, m)) in self.frames.iter().zip(&self.masks).enumerate() {
            if f.resolution() != res || m.resolution() != res {
                return Err(FlowError::validation(format!(
                    "sequence {}: frame {i} resolution mismatch",
                    self.id
                )));
            }
        }
        for p in &self.params {
            p.validate()?;
        }
        Ok(())
    }

    /// Sub-sequence over a frame range (used to hold frames out of training).
    pub fn slice(&self, range: std::ops::Range<usize>) -> SequenceDataset {
        SequenceDataset {
            id: format!("{}[{}..{}]", self.id, range.start, range.end),
            frames: self.frames[range.clone()].to_vec(),
            masks: self.masks[range.clone()].to_vec(),
            params: self.params[range.clone()].to_vec(),
            alpha: self.alpha.clone(),
        }
    }
}
