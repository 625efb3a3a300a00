//! Evaluation battery: PSNR, SSIM, Fréchet embedding distance, cosine
//! identity similarity, and the expression/pose/keypoint distances, plus the
//! self/cross evaluation harness that writes CSV reports.
//!
//! The distribution and identity metrics run on pluggable embedders; the
//! desk-scale default pools the fixed perceptual feature extractor, so the
//! absolute values are NOT comparable against runs that used pretrained
//! Inception or face-identity embedders. Directions and relative
//! comparisons under one embedder are meaningful; cross-paper absolute
//! numbers are not.

use crate::datamodel::{Frame, MotionParams, SequenceDataset};
use crate::error::{FlowError, Result};
use crate::losses::PerceptualFeatureExtractor;
use crate::pipeline::ModelBundle;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::io::Write;
use std::path::Path;

/// Value reported when the mean squared error is exactly zero.
pub const PSNR_CAP_DB: f64 = 99.0;

/// Deterministic image -> feature-vector map for Fréchet and cosine metrics.
pub trait Embedder {
    fn dim(&self) -> usize;
    fn embed(&self, frame: &Frame) -> Vec<f64>;
}

/// The desk-scale default embedder: pooled stage activations of the seeded
/// perceptual feature extractor.
pub struct PooledPhiEmbedder {
    phi: PerceptualFeatureExtractor,
}

impl PooledPhiEmbedder {
    pub fn new(phi: PerceptualFeatureExtractor) -> Self {
        PooledPhiEmbedder { phi }
    }

    pub fn seeded(seed: u64) -> Self {
        PooledPhiEmbedder { phi: PerceptualFeatureExtractor::seeded(seed) }
    }
}

impl Embedder for PooledPhiEmbedder {
    fn dim(&self) -> usize {
        self.phi.embed_dim()
    }

    fn embed(&self, frame: &Frame) -> Vec<f64> {
        self.phi.embed(frame)
    }
}

/// Peak signal-to-noise ratio in dB over a unit dynamic range, capped at
/// [`PSNR_CAP_DB`] for identical images.
pub fn psnr(a: &Frame, b: &Frame) -> Result<f64> {
    if a.resolution() != b.resolution() {
        return Err(FlowError::shape("psnr", format!("{}", a.resolution()), format!("{}", b.resolution())));
    }
    let mut mse = 0.0;
    for (x, y) in a.pixels().data().iter().zip(b.pixels().data()) {
        mse += (x - y) * (x - y);
    }
    mse /= a.pixels().numel() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
}

fn gaussian_kernel_11() -> [f64; 11] {
    let sigma = 1.5;
    let mut k = [0.0; 11];
    let mut sum = 0.0;
    for (i, v) in k.iter_mut().enumerate() {
        let x = i as f64 - 5.0;
        *v = (-x * x / (2.0 * sigma * sigma)).exp();
        sum += *v;
    }
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Structural similarity on luminance: 11x11 Gaussian window (sigma 1.5),
/// C1=(0.01)^2, C2=(0.03)^2, averaged over all valid windows.
pub fn ssim(a: &Frame, b: &Frame) -> Result<f64> {
    if a.resolution() != b.resolution() {
        return Err(FlowError::shape("ssim", format!("{}", a.resolution()), format!("{}", b.resolution())));
    }
    let res = a.resolution();
    if res < 11 {
        return Err(FlowError::validation(format!("ssim needs at least 11px, got {res}")));
    }
    let la = a.luminance();
    let lb = b.luminance();
    let kernel = gaussian_kernel_11();
    // separable Gaussian filtering of x, y, x^2, y^2, xy
    let filter = |img: &[f64]| -> Vec<f64> {
        let mut tmp = vec![0.0; res * res];
        let out_w = res - 10;
        for y in 0..res {
            for x in 0..out_w {
                let mut acc = 0.0;
                for (i, k) in kernel.iter().enumerate() {
                    acc += k * img[y * res + x + i];
                }
                tmp[y * res + x] = acc;
            }
        }
        let mut out = vec![0.0; out_w * out_w];
        for y in 0..out_w {
            for x in 0..out_w {
                let mut acc = 0.0;
                for (i, k) in kernel.iter().enumerate() {
                    acc += k * tmp[(y + i) * res + x];
                }
                out[y * out_w + x] = acc;
            }
        }
        out
    };
    let xa = la.data();
    let xb = lb.data();
    let sq = |v: &[f64]| -> Vec<f64> { v.iter().map(|x| x * x).collect() };
    let prod: Vec<f64> = xa.iter().zip(xb).map(|(x, y)| x * y).collect();
    let mu_a = filter(xa);
    let mu_b = filter(xb);
    let m_aa = filter(&sq(xa));
    let m_bb = filter(&sq(xb));
    let m_ab = filter(&prod);
    let c1 = 0.01f64.powi(2);
    let c2 = 0.03f64.powi(2);
    let mut acc = 0.0;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = m_aa[i] - ma * ma;
        let vb = m_bb[i] - mb * mb;
        let cov = m_ab[i] - ma * mb;
        let s = ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
            / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        acc += s;
    }
    Ok(acc / mu_a.len() as f64)
}

/// Jacobi eigendecomposition of a symmetric matrix (row-major, n x n).
/// Returns eigenvalues and orthonormal eigenvectors (columns).
fn jacobi_eigen(mat: &[f64], n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut a = mat.to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += a[i * n + j] * a[i * n + j];
            }
        }
        if off < 1e-24 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[p * n + q];
                if apq.abs() < 1e-30 {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let eig = (0..n).map(|i| a[i * n + i]).collect();
    (eig, v)
}

/// Principal square root of a symmetric PSD matrix via eigendecomposition;
/// eigenvalues below `-1e-8` are an error, small negatives are clipped to 0.
fn sym_sqrt(mat: &[f64], n: usize) -> Result<Vec<f64>> {
    let (eig, vecs) = jacobi_eigen(mat, n);
    for &e in &eig {
        if e < -1e-8 {
            return Err(FlowError::validation(format!(
                "matrix square root of an indefinite matrix (eigenvalue {e})"
            )));
        }
    }
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let mut acc = 0.0;
            for k in 0..n {
                acc += vecs[i * n + k] * eig[k].max(0.0).sqrt() * vecs[j * n + k];
            }
            out[i * n + j] = acc;
        }
    }
    Ok(out)
}

fn mean_and_cov(set: &[Vec<f64>], dim: usize) -> (Vec<f64>, Vec<f64>) {
    let n = set.len();
    let mut mu = vec![0.0; dim];
    for row in set {
        for (m, v) in mu.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in &mut mu {
        *m /= n as f64;
    }
    let mut cov = vec![0.0; dim * dim];
    for row in set {
        for i in 0..dim {
            let di = row[i] - mu[i];
            for j in 0..dim {
                cov[i * dim + j] += di * (row[j] - mu[j]);
            }
        }
    }
    let denom = (n - 1).max(1) as f64;
    for c in &mut cov {
        *c /= denom;
    }
    (mu, cov)
}

/// Fréchet distance between Gaussian fits of two embedding sets:
/// `|mu_a - mu_b|^2 + Tr(Sa + Sb - 2 (Sa Sb)^(1/2))`, computed through the
/// symmetric form `(Sb^(1/2) Sa Sb^(1/2))^(1/2)`.
pub fn frechet_distance(set_a: &[Vec<f64>], set_b: &[Vec<f64>]) -> Result<f64> {
    if set_a.len() < 2 || set_b.len() < 2 {
        return Err(FlowError::validation("frechet_distance needs at least 2 samples per set".to_string()));
    }
    let dim = set_a[0].len();
    if set_a.iter().chain(set_b).any(|v| v.len() != dim) {
        return Err(FlowError::validation("embedding dimension mismatch".to_string()));
    }
    let (mu_a, cov_a) = mean_and_cov(set_a, dim);
    let (mu_b, cov_b) = mean_and_cov(set_b, dim);
    let mut dist: f64 = mu_a.iter().zip(&mu_b).map(|(a, b)| (a - b) * (a - b)).sum();
    let sqrt_b = sym_sqrt(&cov_b, dim)?;
    // m = sqrt_b * cov_a * sqrt_b
    let mut tmp = vec![0.0; dim * dim];
    crate::tensor::matmul(dim, dim, dim, &sqrt_b, &cov_a, &mut tmp, 0.0);
    let mut m = vec![0.0; dim * dim];
    crate::tensor::matmul(dim, dim, dim, &tmp, &sqrt_b, &mut m, 0.0);
    // symmetrize against roundoff before the second root
    for i in 0..dim {
        for j in (i + 1)..dim {
            let avg = 0.5 * (m[i * dim + j] + m[j * dim + i]);
            m[i * dim + j] = avg;
            m[j * dim + i] = avg;
        }
    }
    let (eig_m, _) = jacobi_eigen(&m, dim);
    let mut tr_sqrt = 0.0;
    for e in eig_m {
        if e < -1e-8 {
            return Err(FlowError::validation(format!("negative eigenvalue {e} in covariance product")));
        }
        tr_sqrt += e.max(0.0).sqrt();
    }
    for i in 0..dim {
        dist += cov_a[i * dim + i] + cov_b[i * dim + i];
    }
    dist -= 2.0 * tr_sqrt;
    Ok(dist.max(0.0))
}

/// Cosine similarity of the two frames' identity embeddings.
pub fn csim(a: &Frame, b: &Frame, embedder: &dyn Embedder) -> Result<f64> {
    let ea = embedder.embed(a);
    let eb = embedder.embed(b);
    cosine(&ea, &eb)
}

fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(FlowError::validation("embedding dimension mismatch".to_string()));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(FlowError::validation("zero-norm embedding".to_string()));
    }
    Ok(dot / (na * nb))
}

/// Average expression distance and average pose distance between two
/// parameter streams: per-frame mean absolute difference of the expression
/// coefficients, and of the concatenated rotation+translation.
pub fn aed_apd(out: &[MotionParams], reference: &[MotionParams]) -> Result<(f64, f64)> {
    if out.len() != reference.len() || out.is_empty() {
        return Err(FlowError::validation(format!(
            "parameter list lengths differ: {} vs {}",
            out.len(),
            reference.len()
        )));
    }
    let mut aed = 0.0;
    let mut apd = 0.0;
    for (o, r) in out.iter().zip(reference) {
        o.validate()?;
        r.validate()?;
        let e: f64 =
            o.beta.iter().zip(&r.beta).map(|(a, b)| (a - b).abs()).sum::<f64>() / o.beta.len() as f64;
        let pose_o: Vec<f64> = o.rot.iter().chain(&o.trans).copied().collect();
        let pose_r: Vec<f64> = r.rot.iter().chain(&r.trans).copied().collect();
        let p: f64 = pose_o.iter().zip(&pose_r).map(|(a, b)| (a - b).abs()).sum::<f64>() / 6.0;
        aed += e;
        apd += p;
    }
    let n = out.len() as f64;
    Ok((aed / n, apd / n))
}

/// Average keypoint distance in pixels: the mean Euclidean distance over
/// frames and matched keypoints.
pub fn akd(kp_out: &[Vec<(f64, f64)>], kp_ref: &[Vec<(f64, f64)>]) -> Result<f64> {
    if kp_out.len() != kp_ref.len() || kp_out.is_empty() {
        return Err(FlowError::validation("keypoint frame counts differ".to_string()));
    }
    let mut acc = 0.0;
    let mut count = 0usize;
    for (fo, fr) in kp_out.iter().zip(kp_ref) {
        if fo.len() != fr.len() || fo.is_empty() {
            return Err(FlowError::validation("keypoint counts differ within a frame".to_string()));
        }
        for (a, b) in fo.iter().zip(fr) {
            acc += ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt();
            count += 1;
        }
    }
    Ok(acc / count as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalMode {
    SelfId,
    CrossId,
}

impl EvalMode {
    pub fn label(&self) -> &'static str {
        match self {
            EvalMode::SelfId => "self",
            EvalMode::CrossId => "cross",
        }
    }
}

#[derive(Clone, Debug)]
pub struct EvalRow {
    pub name: String,
    pub fid: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub csim: f64,
    pub aed: f64,
    pub apd: f64,
    pub akd: f64,
}

#[derive(Clone, Debug)]
pub struct EvalReport {
    pub mode: EvalMode,
    pub seed: u64,
    pub rows: Vec<EvalRow>,
    pub summary: EvalRow,
}

#[derive(Clone, Copy, Debug)]
pub struct EvalOptions {
    pub mode: EvalMode,
    pub seed: u64,
    /// Cap on driving frames per sequence (useful for quick runs); 0 = all.
    pub max_frames: usize,
}

/// Run the evaluation protocol over a dataset.
///
/// Self-ID: the first frame of each sequence is the source, the remaining
/// frames drive. Cross-ID: the driving sequence is paired with a seeded
/// random source frame from another sequence; pairings depend only on the
/// seed, so repeated runs evaluate the same pairs.
///
/// AED/APD/AKD compare the driving parameters (what the output was asked to
/// express) against the target's ground-truth parameters; with no parameter
/// estimator in scope these coincide, so both distances are zero by
/// construction and are reported for schema completeness.
pub fn evaluate(
    bundle: &ModelBundle,
    dataset: &[SequenceDataset],
    embedder: &dyn Embedder,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    if dataset.is_empty() {
        return Err(FlowError::validation("evaluation dataset is empty".to_string()));
    }
    if opts.mode == EvalMode::CrossId && dataset.len() < 2 {
        return Err(FlowError::validation(
            "cross-ID evaluation needs at least 2 sequences".to_string(),
        ));
    }
    let k = bundle.config.window_radius;
    let mut rows = Vec::new();
    let mut all_out_embeddings: Vec<Vec<f64>> = Vec::new();
    let mut all_ref_embeddings: Vec<Vec<f64>> = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);

    for (si, driving) in dataset.iter().enumerate() {
        if driving.len() < 2 {
            continue;
        }
        // choose source frame and identity reference
        let (source, source_mask, identity_ref, start) = match opts.mode {
            EvalMode::SelfId => {
                (driving.frames[0].clone(), driving.masks[0].clone(), driving.frames[0].clone(), 1)
            }
            EvalMode::CrossId => {
                let mut other = rng.random_range(0..dataset.len() - 1);
                if other >= si {
                    other += 1;
                }
                let src_seq = &dataset[other];
                let fi = rng.random_range(0..src_seq.len());
                (src_seq.frames[fi].clone(), src_seq.masks[fi].clone(), src_seq.frames[fi].clone(), 0)
            }
        };
        let end = if opts.max_frames > 0 {
            driving.len().min(start + opts.max_frames)
        } else {
            driving.len()
        };
        let targets = driving.slice(start..end);
        let outputs = bundle.reenact_sequence(&source, &source_mask, &targets, k)?;

        let mut out_emb = Vec::with_capacity(outputs.len());
        let mut ref_emb = Vec::with_capacity(outputs.len());
        let mut psnr_acc = 0.0;
        let mut ssim_acc = 0.0;
        let mut csim_acc = 0.0;
        for (out, tgt) in outputs.iter().zip(&targets.frames) {
            out_emb.push(embedder.embed(out));
            ref_emb.push(embedder.embed(tgt));
            psnr_acc += psnr(out, tgt)?;
            ssim_acc += ssim(out, tgt)?;
            let id_ref = match opts.mode {
                EvalMode::SelfId => tgt,
                EvalMode::CrossId => &identity_ref,
            };
            csim_acc += csim(out, id_ref, embedder)?;
        }
        let n = outputs.len() as f64;
        let fid = frechet_distance(&out_emb, &ref_emb)?;
        // driving parameters double as the output's parameters (documented)
        let (aed, apd) = aed_apd(&targets.params, &targets.params)?;
        let lm: Vec<Vec<(f64, f64)>> = targets
            .params
            .iter()
            .map(|p| crate::datamodel::synth::landmarks(p, &targets.alpha, bundle.config.resolution))
            .collect();
        let akd_v = akd(&lm, &lm)?;
        all_out_embeddings.extend(out_emb);
        all_ref_embeddings.extend(ref_emb);
        rows.push(EvalRow {
            name: driving.id.clone(),
            fid,
            psnr: psnr_acc / n,
            ssim: ssim_acc / n,
            csim: csim_acc / n,
            aed,
            apd,
            akd: akd_v,
        });
    }
    if rows.is_empty() {
        return Err(FlowError::validation("no sequence had enough frames to evaluate".to_string()));
    }
    let pooled_fid = frechet_distance(&all_out_embeddings, &all_ref_embeddings)?;
    let nr = rows.len() as f64;
    let summary = EvalRow {
        name: "summary".to_string(),
        fid: pooled_fid,
        psnr: rows.iter().map(|r| r.psnr).sum::<f64>() / nr,
        ssim: rows.iter().map(|r| r.ssim).sum::<f64>() / nr,
        csim: rows.iter().map(|r| r.csim).sum::<f64>() / nr,
        aed: rows.iter().map(|r| r.aed).sum::<f64>() / nr,
        apd: rows.iter().map(|r| r.apd).sum::<f64>() / nr,
        akd: rows.iter().map(|r| r.akd).sum::<f64>() / nr,
    };
    Ok(EvalReport { mode: opts.mode, seed: opts.seed, rows, summary })
}

/// Write the report as CSV: one row per sequence plus a summary row.
/// Formatting is fixed-precision, so identical runs produce identical bytes.
pub fn write_csv(report: &EvalReport, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| FlowError::io(dir, e))?;
        }
    }
    let mut f = std::io::BufWriter::new(
        std::fs::File::create(path).map_err(|e| FlowError::io(path, e))?,
    );
    let werr = |e: std::io::Error| FlowError::io(path, e);
    writeln!(f, "sequence,fid,psnr,ssim,csim,aed,apd,akd,mode").map_err(werr)?;
    for row in report.rows.iter().chain(std::iter::once(&report.summary)) {
        writeln!(
            f,
            "{},{:.6},{:.4},{:.6},{:.6},{:.6},{:.6},{:.6},{}",
            row.name,
            row.fid,
            row.psnr,
            row.ssim,
            row.csim,
            row.aed,
            row.apd,
            row.akd,
            report.mode.label()
        )
        .map_err(werr)?;
    }
    f.flush().map_err(werr)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn frame_from(values: Vec<f64>, res: usize) -> Frame {
        Frame::new(Tensor::from_vec(&[3, res, res], values)).unwrap()
    }

    fn random_frame(rng: &mut ChaCha8Rng, res: usize) -> Frame {
        frame_from((0..3 * res * res).map(|_| rng.random_range(0.0..1.0)).collect(), res)
    }

    #[test]
    fn psnr_identity_hits_cap() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_frame(&mut rng, 16);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP_DB);
    }

    #[test]
    fn psnr_constant_half_offset_is_6dB() {
        let a = frame_from(vec![0.75; 3 * 256], 16);
        let b = frame_from(vec![0.25; 3 * 256], 16);
        let got = psnr(&a, &b).unwrap();
        assert!((got - 6.0206).abs() < 1e-3, "{got}");
    }

    #[test]
    fn psnr_decreases_monotonically_with_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let base = random_frame(&mut rng, 16);
        let mut prev = f64::INFINITY;
        for amp in [0.01, 0.03, 0.06, 0.12, 0.2] {
            let noisy = Frame::from_tensor_clamped(Tensor::from_vec(
                &[3, 16, 16],
                base.pixels()
                    .data()
                    .iter()
                    .map(|v| v + rng.random_range(-amp..amp))
                    .collect(),
            ))
            .unwrap();
            let p = psnr(&base, &noisy).unwrap();
            assert!(p < prev, "psnr not monotone: {p} !< {prev}");
            prev = p;
        }
    }

    #[test]
    fn ssim_identity_is_one_and_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_frame(&mut rng, 16);
        let b = random_frame(&mut rng, 16);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let ab = ssim(&a, &b).unwrap();
        let ba = ssim(&b, &a).unwrap();
        assert!((ab - ba).abs() < 1e-12);
        assert!((-1.0..=1.0).contains(&ab));
    }

    #[test]
    fn ssim_of_inverted_binary_image_is_negative() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut vals = vec![0.0; 3 * 16 * 16];
        for i in 0..256 {
            let v = if rng.random_range(0.0..1.0) > 0.5 { 1.0 } else { 0.0 };
            for c in 0..3 {
                vals[c * 256 + i] = v;
            }
        }
        let a = frame_from(vals.clone(), 16);
        let b = frame_from(vals.iter().map(|v| 1.0 - v).collect(), 16);
        assert!(ssim(&a, &b).unwrap() < 0.0);
    }

    #[test]
    fn ssim_rejects_tiny_images() {
        let a = frame_from(vec![0.0; 3 * 64], 8);
        assert!(ssim(&a, &a).is_err());
    }

    #[test]
    fn frechet_identical_sets_are_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let set: Vec<Vec<f64>> =
            (0..20).map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let d = frechet_distance(&set, &set).unwrap();
        assert!(d.abs() < 1e-6, "{d}");
    }

    #[test]
    fn frechet_1d_gaussian_closed_form() {
        // N(0,1) vs N(1,1): d^2 = (mu1-mu2)^2 + (s1-s2)^2 = 1
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let normal = |rng: &mut ChaCha8Rng| {
            // Box-Muller
            let u1: f64 = rng.random_range(1e-12..1.0);
            let u2: f64 = rng.random_range(0.0..1.0);
            (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
        };
        let a: Vec<Vec<f64>> = (0..10_000).map(|_| vec![normal(&mut rng)]).collect();
        let b: Vec<Vec<f64>> = (0..10_000).map(|_| vec![normal(&mut rng) + 1.0]).collect();
        let d = frechet_distance(&a, &b).unwrap();
        assert!((d - 1.0).abs() < 0.05, "{d}");
    }

    #[test]
    fn frechet_invariant_to_sample_order_and_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a: Vec<Vec<f64>> =
            (0..12).map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let b: Vec<Vec<f64>> =
            (0..15).map(|_| (0..3).map(|_| rng.random_range(-1.0..2.0)).collect()).collect();
        let d = frechet_distance(&a, &b).unwrap();
        let mut a_rev = a.clone();
        a_rev.reverse();
        let d_rev = frechet_distance(&a_rev, &b).unwrap();
        assert!((d - d_rev).abs() < 1e-9);
        let d_sym = frechet_distance(&b, &a).unwrap();
        assert!((d - d_sym).abs() < 1e-6, "{d} vs {d_sym}");
    }

    #[test]
    fn frechet_rejects_dimension_mismatch_and_tiny_sets() {
        let a = vec![vec![0.0, 1.0], vec![1.0, 0.0]];
        let b = vec![vec![0.0], vec![1.0]];
        assert!(frechet_distance(&a, &b).is_err());
        let single = vec![vec![0.0, 1.0]];
        assert!(frechet_distance(&a, &single).is_err());
    }

    #[test]
    fn csim_identity_negation_and_loop_oracle() {
        struct RawEmbedder;
        impl Embedder for RawEmbedder {
            fn dim(&self) -> usize {
                12
            }
            fn embed(&self, frame: &Frame) -> Vec<f64> {
                frame.pixels().data()[..12].iter().map(|v| v - 0.5).collect()
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = random_frame(&mut rng, 16);
        let b = random_frame(&mut rng, 16);
        let e = RawEmbedder;
        assert!((csim(&a, &a, &e).unwrap() - 1.0).abs() < 1e-12);
        // negated embedding
        let ea = e.embed(&a);
        let neg: Vec<f64> = ea.iter().map(|v| -v).collect();
        assert!((cosine(&ea, &neg).unwrap() + 1.0).abs() < 1e-12);
        // loop oracle
        let eb = e.embed(&b);
        let mut dot = 0.0;
        let mut na = 0.0;
        let mut nb = 0.0;
        for i in 0..12 {
            dot += ea[i] * eb[i];
            na += ea[i] * ea[i];
            nb += eb[i] * eb[i];
        }
        let want = dot / (na.sqrt() * nb.sqrt());
        assert!((csim(&a, &b, &e).unwrap() - want).abs() < 1e-8);
    }

    #[test]
    fn csim_zero_norm_is_error() {
        assert!(cosine(&[0.0, 0.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn aed_apd_identity_offset_and_permutation() {
        use crate::datamodel::MotionParams;
        let mut base: Vec<MotionParams> = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..6 {
            let mut p = MotionParams::zeros();
            for b in p.beta.iter_mut() {
                *b = rng.random_range(-1.0..1.0);
            }
            p.rot = [rng.random_range(-1.0..1.0), 0.1, -0.2];
            base.push(p);
        }
        let (aed, apd) = aed_apd(&base, &base).unwrap();
        assert_eq!((aed, apd), (0.0, 0.0));
        // beta offset by 0.1, pose identical -> (0.1, 0)
        let shifted: Vec<MotionParams> = base
            .iter()
            .map(|p| {
                let mut q = p.clone();
                for b in q.beta.iter_mut() {
                    *b += 0.1;
                }
                q
            })
            .collect();
        let (aed, apd) = aed_apd(&shifted, &base).unwrap();
        assert!((aed - 0.1).abs() < 1e-12);
        assert_eq!(apd, 0.0);
        // permuting both lists together changes nothing
        let mut perm_a = shifted.clone();
        let mut perm_b = base.clone();
        perm_a.reverse();
        perm_b.reverse();
        let (aed2, apd2) = aed_apd(&perm_a, &perm_b).unwrap();
        assert!((aed - aed2).abs() < 1e-12);
        assert_eq!(apd, apd2);
        // length mismatch
        assert!(aed_apd(&base[..3], &base).is_err());
    }

    #[test]
    fn akd_identity_345_and_homogeneity() {
        let kp: Vec<Vec<(f64, f64)>> =
            vec![vec![(1.0, 2.0), (3.0, 4.0)], vec![(5.0, 6.0), (7.0, 8.0)]];
        assert_eq!(akd(&kp, &kp).unwrap(), 0.0);
        let shifted: Vec<Vec<(f64, f64)>> = kp
            .iter()
            .map(|f| f.iter().map(|(x, y)| (x + 3.0, y + 4.0)).collect())
            .collect();
        assert!((akd(&shifted, &kp).unwrap() - 5.0).abs() < 1e-12);
        let double: Vec<Vec<(f64, f64)>> = kp
            .iter()
            .map(|f| f.iter().map(|(x, y)| (x + 6.0, y + 8.0)).collect())
            .collect();
        assert!((akd(&double, &kp).unwrap() - 10.0).abs() < 1e-12);
        // K mismatch
        let bad = vec![vec![(0.0, 0.0)], vec![(0.0, 0.0), (1.0, 1.0)]];
        assert!(akd(&bad, &kp).is_err());
    }

    #[test]
    fn jacobi_recovers_known_spectrum() {
        // symmetric matrix with eigenvalues 1 and 3
        let m = [2.0, 1.0, 1.0, 2.0];
        let (mut eig, _) = jacobi_eigen(&m, 2);
        eig.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!((eig[0] - 1.0).abs() < 1e-10);
        assert!((eig[1] - 3.0).abs() < 1e-10);
        let s = sym_sqrt(&m, 2).unwrap();
        // s * s == m
        let mut back = vec![0.0; 4];
        crate::tensor::matmul(2, 2, 2, &s, &s, &mut back, 0.0);
        for (got, want) in back.iter().zip(m) {
            assert!((got - want).abs() < 1e-10);
        }
    }
}
