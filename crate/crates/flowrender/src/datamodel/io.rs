//! On-disk dataset layout:
//!
//! ```text
//! <root>/<seq_id>/frames/%06d.png    8-bit RGB
//! <root>/<seq_id>/masks/%06d.png     8-bit grayscale
//! <root>/<seq_id>/params.jsonl       one JSON object per frame:
//!                                    {"beta":[64], "rot":[3], "trans":[3], "crop":[3]}
//! <root>/<seq_id>/identity.json      {"alpha":[80]}
//! ```
//!
//! Pixels decode as `value / 255.0` and encode as `round(value * 255)`.

use super::{Frame, Mask, MotionParams, SequenceDataset, ALPHA_LEN};
use crate::error::{FlowError, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

#[derive(Serialize, Deserialize)]
struct IdentityFile {
    alpha: Vec<f64>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> FlowError + '_ {
    move |e| FlowError::io(path, e)
}

pub fn save_frame_png(frame: &Frame, path: &Path) -> Result<()> {
    let res = frame.resolution();
    let hw = res * res;
    let d = frame.pixels().data();
    let mut bytes = Vec::with_capacity(3 * hw);
    for i in 0..hw {
        for c in 0..3 {
            bytes.push((d[c * hw + i] * 255.0).round().clamp(0.0, 255.0) as u8);
        }
    }
    let img = image::RgbImage::from_raw(res as u32, res as u32, bytes)
        .expect("buffer sized for image");
    img.save(path)
        .map_err(|e| FlowError::Image { path: path.to_path_buf(), message: e.to_string() })
}

pub fn save_mask_png(mask: &Mask, path: &Path) -> Result<()> {
    let res = mask.resolution();
    let bytes: Vec<u8> = mask
        .alpha()
        .data()
        .iter()
        .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    let img = image::GrayImage::from_raw(res as u32, res as u32, bytes)
        .expect("buffer sized for image");
    img.save(path)
        .map_err(|e| FlowError::Image { path: path.to_path_buf(), message: e.to_string() })
}

pub fn load_frame_png(path: &Path) -> Result<Frame> {
    let img = image::ImageReader::open(path)
        .map_err(io_err(path))?
        .decode()
        .map_err(|e| FlowError::Image { path: path.to_path_buf(), message: e.to_string() })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    if w != h {
        return Err(FlowError::shape("frame png", "square", format!("{w}x{h}")));
    }
    let hw = w * h;
    let mut data = vec![0.0; 3 * hw];
    for (i, px) in img.pixels().enumerate() {
        for c in 0..3 {
            data[c * hw + i] = px.0[c] as f64 / 255.0;
        }
    }
    Frame::new(Tensor::from_vec(&[3, h, w], data))
}

pub fn load_mask_png(path: &Path) -> Result<Mask> {
    let img = image::ImageReader::open(path)
        .map_err(io_err(path))?
        .decode()
        .map_err(|e| FlowError::Image { path: path.to_path_buf(), message: e.to_string() })?
        .to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<f64> = img.as_raw().iter().map(|v| *v as f64 / 255.0).collect();
    Mask::new(Tensor::from_vec(&[1, h, w], data))
}

pub fn save_sequence(seq: &SequenceDataset, root: &Path) -> Result<()> {
    seq.validate()?;
    let dir = root.join(&seq.id);
    let frames_dir = dir.join("frames");
    let masks_dir = dir.join("masks");
    fs::create_dir_all(&frames_dir).map_err(io_err(&frames_dir))?;
    fs::create_dir_all(&masks_dir).map_err(io_err(&masks_dir))?;
    for (i, (frame, mask)) in seq.frames.iter().zip(&seq.masks).enumerate() {
        save_frame_png(frame, &frames_dir.join(format!("{i:06}.png")))?;
        save_mask_png(mask, &masks_dir.join(format!("{i:06}.png")))?;
    }
    let params_path = dir.join("params.jsonl");
    let mut out = fs::File::create(&params_path).map_err(io_err(&params_path))?;
    for p in &seq.params {
        let line = serde_json::to_string(p)
            .map_err(|e| FlowError::validation(format!("params serialize: {e}")))?;
        writeln!(out, "{line}").map_err(io_err(&params_path))?;
    }
    let id_path = dir.join("identity.json");
    let id_json = serde_json::to_string(&IdentityFile { alpha: seq.alpha.clone() })
        .map_err(|e| FlowError::validation(format!("identity serialize: {e}")))?;
    fs::write(&id_path, id_json).map_err(io_err(&id_path))?;
    Ok(())
}

pub fn load_sequence(dir: &Path) -> Result<SequenceDataset> {
    let id = dir
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| FlowError::validation(format!("bad sequence dir {}", dir.display())))?
        .to_string();
    let params_path = dir.join("params.jsonl");
    let file = fs::File::open(&params_path).map_err(io_err(&params_path))?;
    let mut params = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(io_err(&params_path))?;
        if line.trim().is_empty() {
            continue;
        }
        let p: MotionParams = serde_json::from_str(&line)
            .map_err(|e| FlowError::validation(format!("{}: {e}", params_path.display())))?;
        params.push(p);
    }
    let id_path = dir.join("identity.json");
    let id_raw = fs::read_to_string(&id_path).map_err(io_err(&id_path))?;
    let identity: IdentityFile = serde_json::from_str(&id_raw)
        .map_err(|e| FlowError::validation(format!("{}: {e}", id_path.display())))?;
    if identity.alpha.len() != ALPHA_LEN {
        return Err(FlowError::validation(format!(
            "{}: identity has {} coefficients",
            id_path.display(),
            identity.alpha.len()
        )));
    }
    let mut frames = Vec::with_capacity(params.len());
    let mut masks = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        frames.push(load_frame_png(&dir.join("frames").join(format!("{i:06}.png")))?);
        masks.push(load_mask_png(&dir.join("masks").join(format!("{i:06}.png")))?);
    }
    let seq = SequenceDataset { id, frames, masks, params, alpha: identity.alpha };
    seq.validate()?;
    Ok(seq)
}

pub fn save_dataset(sequences: &[SequenceDataset], root: &Path) -> Result<()> {
    fs::create_dir_all(root).map_err(io_err(root))?;
    for seq in sequences {
        save_sequence(seq, root)?;
    }
    Ok(())
}

/// Load every sequence directory under `root`, sorted by name.
pub fn load_dataset(root: &Path) -> Result<Vec<SequenceDataset>> {
    let mut dirs: Vec<_> = fs::read_dir(root)
        .map_err(io_err(root))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir() && p.join("params.jsonl").exists())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(FlowError::validation(format!(
            "no sequence directories under {}",
            root.display()
        )));
    }
    dirs.iter().map(|d| load_sequence(d)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::synth::make_synthetic_dataset;

    #[test]
    fn dataset_roundtrip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let ds = make_synthetic_dataset(3, 2, 3, 32).unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].id, "seq_0000");
        assert_eq!(back[0].params, ds[0].params);
        assert_eq!(back[0].alpha, ds[0].alpha);
        let orig = ds[0].frames[1].pixels().data();
        let got = back[0].frames[1].pixels().data();
        let max_err = orig
            .iter()
            .zip(got)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_err <= 0.5 / 255.0 + 1e-12, "quantization error {max_err}");
    }

    #[test]
    fn repeated_save_is_byte_identical() {
        let ds = make_synthetic_dataset(9, 1, 2, 32).unwrap();
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        save_dataset(&ds, d1.path()).unwrap();
        save_dataset(&ds, d2.path()).unwrap();
        for rel in ["seq_0000/frames/000000.png", "seq_0000/masks/000001.png", "seq_0000/params.jsonl"] {
            let a = std::fs::read(d1.path().join(rel)).unwrap();
            let b = std::fs::read(d2.path().join(rel)).unwrap();
            assert_eq!(a, b, "{rel} differs between identical saves");
        }
    }

    #[test]
    fn load_missing_root_is_io_error() {
        let err = load_dataset(Path::new("/nonexistent/flowrender-ds")).unwrap_err();
        assert_eq!(err.exit_code(), 1);
    }
}
