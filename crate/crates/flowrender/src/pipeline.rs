//! The four-stage inference path — separate, warp, refine, composite +
//! inpaint — plus the checkpoint container that bundles every weight group
//! with its config.

use crate::config::ModelConfig;
use crate::datamodel::{
    make_window, separate_foreground, Frame, Mask, ParamWindow,
    SequenceDataset,
};
use crate::error::{FlowError, Result};
use crate::mapping::MappingNet;
use crate::nn::{BoundParams, ParamSpec, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::transunet::TransUNet;
use crate::warp3d::Warp3d;
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: [u8; 4] = *b"FLRD";
const VERSION: u32 = 1;

/// Everything needed to run the pipeline: the architecture config and the
/// named weight tensors of all five networks.
#[derive(Clone, Debug)]
pub struct ModelBundle {
    pub config: ModelConfig,
    pub params: ParamStore,
}

/// Optional training-state payload stored next to the weights so a run can
/// resume mid-phase: a small JSON block plus optimizer moment tensors.
#[derive(Clone, Debug, Default)]
pub struct CheckpointExtra {
    pub state_json: String,
    pub optim: BTreeMap<String, Tensor>,
}

impl ModelBundle {
    /// Full parameter inventory of the bundle for a config.
    pub fn specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
        let mut specs = MappingNet::from_config(cfg).param_specs();
        specs.extend(Warp3d::new(cfg).param_specs());
        specs.extend(TransUNet::refiner(cfg).param_specs());
        specs.extend(TransUNet::inpainter(cfg).param_specs());
        specs
    }

    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let params = ParamStore::init(&Self::specs(cfg), seed)?;
        Ok(ModelBundle { config: cfg.clone(), params })
    }

    /// Check that the stored tensors exactly match the config's inventory.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        self.params.check_inventory(&Self::specs(&self.config))
    }

    pub fn mapping(&self) -> MappingNet {
        MappingNet::from_config(&self.config)
    }

    pub fn warp(&self) -> Warp3d {
        Warp3d::new(&self.config)
    }

    pub fn refiner(&self) -> TransUNet {
        TransUNet::refiner(&self.config)
    }

    pub fn inpainter(&self) -> TransUNet {
        TransUNet::inpainter(&self.config)
    }

    /// Re-enact one frame: the source foreground is warped toward the
    /// window's motion, refined, composited over the source background, and
    /// the blank pixels are inpainted.
    pub fn reenact_frame(
        &self,
        src: &Frame,
        src_mask: &Mask,
        target_window: &ParamWindow,
    ) -> Result<Frame> {
        if src.resolution() != self.config.resolution {
            return Err(FlowError::shape(
                "reenact input",
                format!("{}", self.config.resolution),
                format!("{}", src.resolution()),
            ));
        }
        let (src_fg, src_bg) =
            separate_foreground(src, src_mask).map_err(|e| e.in_stage("pre-process"))?;

        let mut tape = Tape::new();
        let p = BoundParams::bind_all_constant(&mut tape, &self.params);
        let window = tape.constant(target_window.tensor().clone());
        let motion = self
            .mapping()
            .forward(&mut tape, &p, window)
            .map_err(|e| e.in_stage("motion-mapping"))?;
        let fg_var = tape.constant(src_fg.pixels().clone());
        let warp_out = self
            .warp()
            .forward(&mut tape, &p, fg_var, motion)
            .map_err(|e| e.in_stage("3d-warp"))?;
        let cat = tape.concat_first(fg_var, warp_out.warped);
        let refined = self
            .refiner()
            .forward(&mut tape, &p, cat, Some(motion))
            .map_err(|e| e.in_stage("refine"))?;
        let (composited, _blank) = composite_on_tape(&mut tape, refined, &src_bg, src_mask)
            .map_err(|e| e.in_stage("composite"))?;
        let inpainter = self.inpainter();
        let m = if inpainter.adain_enabled { Some(motion) } else { None };
        let out = inpainter
            .forward(&mut tape, &p, composited, m)
            .map_err(|e| e.in_stage("inpaint"))?;
        Frame::new(tape.value(out).clone())
    }

    /// Re-enact a whole driving sequence frame by frame; windows are built
    /// with clamping, so any driving length (even a single frame) works.
    pub fn reenact_sequence(
        &self,
        src: &Frame,
        src_mask: &Mask,
        driving: &SequenceDataset,
        window_radius: usize,
    ) -> Result<Vec<Frame>> {
        if driving.is_empty() {
            return Err(FlowError::validation("driving sequence has no frames".to_string()));
        }
        (0..driving.len())
            .map(|i| {
                let window = make_window(driving, i, window_radius)?;
                self.reenact_frame(src, src_mask, &window)
            })
            .collect()
    }

    // ---- checkpoint container ----

    pub fn save(&self, path: &Path, extra: Option<&CheckpointExtra>) -> Result<()> {
        self.validate()?;
        let dir = path.parent().unwrap_or_else(|| Path::new("."));
        std::fs::create_dir_all(dir).map_err(|e| FlowError::io(dir, e))?;
        let tmp = path.with_extension("tmp");
        {
            let mut f = std::io::BufWriter::new(
                std::fs::File::create(&tmp).map_err(|e| FlowError::io(&tmp, e))?,
            );
            let werr = |e: std::io::Error| FlowError::io(&tmp, e);
            f.write_all(&MAGIC).map_err(werr)?;
            f.write_all(&VERSION.to_le_bytes()).map_err(werr)?;
            let config_json = serde_json::to_vec(&self.config)
                .map_err(|e| FlowError::Checkpoint(format!("config serialize: {e}")))?;
            f.write_all(&(config_json.len() as u64).to_le_bytes()).map_err(werr)?;
            f.write_all(&config_json).map_err(werr)?;
            let state = extra.map(|e| e.state_json.as_bytes()).unwrap_or_default();
            f.write_all(&(state.len() as u64).to_le_bytes()).map_err(werr)?;
            f.write_all(state).map_err(werr)?;

            let optim = extra.map(|e| &e.optim);
            let n = self.params.len() + optim.map_or(0, |m| m.len());
            f.write_all(&(n as u64).to_le_bytes()).map_err(werr)?;
            let write_tensor = |f: &mut dyn Write, name: &str, t: &Tensor| -> Result<()> {
                let werr = |e: std::io::Error| FlowError::io(&tmp, e);
                f.write_all(&(name.len() as u64).to_le_bytes()).map_err(werr)?;
                f.write_all(name.as_bytes()).map_err(werr)?;
                f.write_all(&(t.shape().len() as u64).to_le_bytes()).map_err(werr)?;
                for d in t.shape() {
                    f.write_all(&(*d as u64).to_le_bytes()).map_err(werr)?;
                }
                for v in t.data() {
                    f.write_all(&v.to_le_bytes()).map_err(werr)?;
                }
                Ok(())
            };
            for (name, t) in self.params.iter() {
                write_tensor(&mut f, name, t)?;
            }
            if let Some(m) = optim {
                for (name, t) in m {
                    write_tensor(&mut f, &format!("optim/{name}"), t)?;
                }
            }
            f.flush().map_err(werr)?;
        }
        std::fs::rename(&tmp, path).map_err(|e| FlowError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<(Self, CheckpointExtra)> {
        let mut f = std::io::BufReader::new(
            std::fs::File::open(path).map_err(|e| FlowError::io(path, e))?,
        );
        let rerr = |e: std::io::Error| FlowError::io(path, e);
        let mut magic = [0u8; 4];
        f.read_exact(&mut magic).map_err(rerr)?;
        if magic != MAGIC {
            return Err(FlowError::Checkpoint("bad magic".to_string()));
        }
        let mut u32b = [0u8; 4];
        f.read_exact(&mut u32b).map_err(rerr)?;
        let version = u32::from_le_bytes(u32b);
        if version != VERSION {
            return Err(FlowError::Checkpoint(format!("unsupported version {version}")));
        }
        let mut u64b = [0u8; 8];
        let mut read_len = |f: &mut dyn Read| -> Result<usize> {
            f.read_exact(&mut u64b).map_err(|e| FlowError::io(path, e))?;
            Ok(u64::from_le_bytes(u64b) as usize)
        };
        let config_len = read_len(&mut f)?;
        let mut config_raw = vec![0u8; config_len];
        f.read_exact(&mut config_raw).map_err(rerr)?;
        let config: ModelConfig = serde_json::from_slice(&config_raw)
            .map_err(|e| FlowError::Checkpoint(format!("config parse: {e}")))?;
        let state_len = read_len(&mut f)?;
        let mut state_raw = vec![0u8; state_len];
        f.read_exact(&mut state_raw).map_err(rerr)?;
        let state_json = String::from_utf8(state_raw)
            .map_err(|e| FlowError::Checkpoint(format!("state block: {e}")))?;
        let n = read_len(&mut f)?;
        let mut params = ParamStore::default();
        let mut optim = BTreeMap::new();
        for _ in 0..n {
            let name_len = read_len(&mut f)?;
            let mut name_raw = vec![0u8; name_len];
            f.read_exact(&mut name_raw).map_err(rerr)?;
            let name = String::from_utf8(name_raw)
                .map_err(|e| FlowError::Checkpoint(format!("tensor name: {e}")))?;
            let ndim = read_len(&mut f)?;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(read_len(&mut f)?);
            }
            let numel: usize = shape.iter().product();
            let mut data = vec![0.0f64; numel];
            let mut buf = [0u8; 8];
            for v in data.iter_mut() {
                f.read_exact(&mut buf).map_err(rerr)?;
                *v = f64::from_le_bytes(buf);
            }
            let t = Tensor::from_vec(&shape, data);
            if let Some(stripped) = name.strip_prefix("optim/") {
                optim.insert(stripped.to_string(), t);
            } else {
                params.insert_raw(name, t);
            }
        }
        let bundle = ModelBundle { config, params };
        bundle.validate()?;
        Ok((bundle, CheckpointExtra { state_json, optim }))
    }
}

/// Tape variant of [`composite_foreground`]: the coverage and blank masks are
/// derived from the refined foreground's current value and enter the graph
/// as constants, so gradients flow through the covered foreground pixels
/// only.
pub fn composite_on_tape(
    tape: &mut Tape,
    refined_fg: Var,
    src_bg: &Frame,
    src_mask: &Mask,
) -> Result<(Var, Mask)> {
    let shape = tape.shape_of(refined_fg);
    let res = src_bg.resolution();
    if shape != [3, res, res] || src_mask.resolution() != res {
        return Err(FlowError::shape(
            "composite_on_tape",
            format!("[3, {res}, {res}]"),
            format!("{shape:?}"),
        ));
    }
    let hw = res * res;
    let refined = tape.value(refined_fg);
    let md = src_mask.alpha().data();
    let bd = src_bg.pixels().data();
    let mut cover = vec![0.0; 3 * hw];
    let mut fixed = vec![0.0; 3 * hw];
    let mut blank = vec![0.0; hw];
    for i in 0..hw {
        let luma = 0.299 * refined.data()[i]
            + 0.587 * refined.data()[hw + i]
            + 0.114 * refined.data()[2 * hw + i];
        let new_fg = luma > crate::datamodel::FG_LUMA_EPS;
        let is_blank = !new_fg && md[i] > 0.5;
        blank[i] = if is_blank { 1.0 } else { 0.0 };
        for c in 0..3 {
            if new_fg {
                cover[c * hw + i] = 1.0;
            } else if !is_blank {
                fixed[c * hw + i] = bd[c * hw + i] * (1.0 - md[i]);
            }
        }
    }
    let cover_var = tape.constant(Tensor::from_vec(&[3, res, res], cover));
    let fixed_var = tape.constant(Tensor::from_vec(&[3, res, res], fixed));
    let masked = tape.mul(refined_fg, cover_var);
    let comp = tape.add(masked, fixed_var);
    Ok((comp, Mask::new(Tensor::from_vec(&[1, res, res], blank))?))
}

/// Convenience for tests and tools: run a bundle's warp stage on a frame.
pub fn warped_only(
    bundle: &ModelBundle,
    src: &Frame,
    src_mask: &Mask,
    window: &ParamWindow,
) -> Result<(Frame, Frame)> {
    let (src_fg, _) = separate_foreground(src, src_mask)?;
    let motion = bundle.mapping().map_motion(&bundle.params, window)?;
    let (warped, _, _) = bundle.warp().warp_frame(&bundle.params, &src_fg, &motion)?;
    let refined = crate::transunet::refine(&bundle.params, &bundle.config, &src_fg, &warped, &motion)?;
    Ok((warped, refined))
}

/// Output directory naming for re-enacted frames.
pub fn frame_filename(index: usize) -> String {
    format!("{index:06}.png")
}

/// A side-by-side source | driving | output strip for visual inspection.
pub fn triptych(source: &Frame, driving: &Frame, output: &Frame) -> Result<Tensor> {
    let r = source.resolution();
    if driving.resolution() != r || output.resolution() != r {
        return Err(FlowError::shape("triptych", format!("{r}"), "mismatched".to_string()));
    }
    let mut out = Tensor::zeros(&[3, r, 3 * r]);
    for (slot, frame) in [source, driving, output].iter().enumerate() {
        let d = frame.pixels().data();
        for c in 0..3 {
            for y in 0..r {
                for x in 0..r {
                    out.data_mut()[(c * r + y) * 3 * r + slot * r + x] = d[(c * r + y) * r + x];
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::{composite_foreground, synth::make_synthetic_sequence};

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
    fn bundle_inventory_has_expected_groups() {
        let cfg = toy_cfg();
        let bundle = ModelBundle::init(&cfg, 1).unwrap();
        bundle.validate().unwrap();
        for prefix in ["mapping/", "flow/", "enc3d/", "dec3d/", "refiner/", "inpainter/"] {
            assert!(
                bundle.params.names().any(|n| n.starts_with(prefix)),
                "no parameters under {prefix}"
            );
        }
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let cfg = toy_cfg();
        let mut bundle = ModelBundle::init(&cfg, 2).unwrap();
        bundle.params.randomize(3, 0.5);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.flrd");
        let mut extra = CheckpointExtra {
            state_json: r#"{"phase":1,"epoch":7}"#.to_string(),
            optim: BTreeMap::new(),
        };
        extra.optim.insert("m/mapping/out/w".to_string(), Tensor::full(&[8, 73], 0.25));
        bundle.save(&path, Some(&extra)).unwrap();
        let (loaded, extra2) = ModelBundle::load(&path).unwrap();
        assert_eq!(loaded.config, bundle.config);
        assert_eq!(loaded.params, bundle.params);
        assert_eq!(extra2.state_json, extra.state_json);
        assert_eq!(extra2.optim.get("m/mapping/out/w"), extra.optim.get("m/mapping/out/w"));
    }

    #[test]
    fn checkpoint_rejects_wrong_inventory() {
        let cfg = toy_cfg();
        let bundle = ModelBundle::init(&cfg, 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.flrd");
        bundle.save(&path, None).unwrap();
        // corrupt: claim a different unet depth in the config
        let (mut other, _) = ModelBundle::load(&path).unwrap();
        other.config.unet_depth = 3;
        assert!(other.validate().is_err());
    }

    #[test]
    fn reenact_frame_contract_shape_range_determinism() {
        let cfg = toy_cfg();
        let mut bundle = ModelBundle::init(&cfg, 5).unwrap();
        bundle.params.randomize(6, 0.2);
        let seq = make_synthetic_sequence(7, 5, 32).unwrap();
        let window = make_window(&seq, 3, cfg.window_radius).unwrap();
        let out1 = bundle.reenact_frame(&seq.frames[0], &seq.masks[0], &window).unwrap();
        let out2 = bundle.reenact_frame(&seq.frames[0], &seq.masks[0], &window).unwrap();
        assert_eq!(out1.resolution(), 32);
        assert!(out1.pixels().data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(out1, out2);
    }

    #[test]
    fn reenact_sequence_count_matches_driving_and_is_stateless() {
        let cfg = toy_cfg();
        let mut bundle = ModelBundle::init(&cfg, 8).unwrap();
        bundle.params.randomize(9, 0.2);
        let seq = make_synthetic_sequence(10, 6, 32).unwrap();
        let outs = bundle
            .reenact_sequence(&seq.frames[0], &seq.masks[0], &seq, cfg.window_radius)
            .unwrap();
        assert_eq!(outs.len(), seq.len());
        // per-frame independence: i-th result equals a direct call
        let w2 = make_window(&seq, 2, cfg.window_radius).unwrap();
        let direct = bundle.reenact_frame(&seq.frames[0], &seq.masks[0], &w2).unwrap();
        assert_eq!(outs[2], direct);
    }

    #[test]
    fn one_frame_driving_sequence_works_via_clamping() {
        let cfg = toy_cfg();
        let mut bundle = ModelBundle::init(&cfg, 11).unwrap();
        bundle.params.randomize(12, 0.2);
        let seq = make_synthetic_sequence(13, 2, 32).unwrap();
        let single = seq.slice(0..1);
        let outs = bundle
            .reenact_sequence(&seq.frames[1], &seq.masks[1], &single, cfg.window_radius)
            .unwrap();
        assert_eq!(outs.len(), 1);
    }

    #[test]
    fn composite_on_tape_matches_value_composite() {
        let seq = make_synthetic_sequence(14, 3, 32).unwrap();
        let (fg, bg) = separate_foreground(&seq.frames[0], &seq.masks[0]).unwrap();
        let (want_comp, want_blank) = composite_foreground(&fg, &bg, &seq.masks[1]).unwrap();
        let mut tape = Tape::new();
        let fg_var = tape.constant(fg.pixels().clone());
        let (comp, blank) = composite_on_tape(&mut tape, fg_var, &bg, &seq.masks[1]).unwrap();
        assert_eq!(tape.value(comp).data(), want_comp.pixels().data());
        assert_eq!(blank, want_blank);
    }
}
