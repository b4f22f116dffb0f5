//! Synthetic sparse-depth scenes, sparsification of dense maps, and 16-bit
//! PGM file I/O.
//!
//! Scenes are desk-scale stand-ins for automotive depth maps: positive
//! depth in [1, 80] meters, piecewise smooth with optional hard edges,
//! since edges are where completion errors concentrate. Depth files store
//! `count = depth / scale` as big-endian 16-bit PGM with a default scale of
//! 1/256 m per count; confidence maps use a 1/65535 scale so the full
//! [0, 1] range maps onto the container.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Default depth quantization: meters per stored count.
pub const DEPTH_SCALE: f64 = 1.0 / 256.0;
/// Confidence quantization: full [0, 1] range over 16 bits.
pub const CONF_SCALE: f64 = 1.0 / 65535.0;

/// One completion example: dense ground truth, its sparsified input, and
/// the binary input confidence.
#[derive(Debug, Clone)]
pub struct Scene {
    /// Dense ground-truth depth in meters, `[h, w]`.
    pub ground_truth: Tensor,
    /// `ground_truth * confidence`.
    pub sparse: Tensor,
    /// Binary input confidence: 1 where a sample exists.
    pub confidence: Tensor,
    /// Optional ground-truth validity mask; `None` means fully valid.
    pub gt_valid: Option<Vec<bool>>,
}

impl Scene {
    pub fn height(&self) -> usize {
        self.ground_truth.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.ground_truth.shape()[1]
    }

    pub fn valid_mask(&self) -> Vec<bool> {
        self.gt_valid
            .clone()
            .unwrap_or_else(|| vec![true; self.ground_truth.len()])
    }
}

/// Scene generator families.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SceneKind {
    /// Two slanted planes with a hard depth edge of at least 5 m.
    Planes,
    /// A global slant plus step bands.
    SlantedSteps,
    /// Smooth product-of-sines control case, spatial gradient below 1 m/px.
    Sinusoid,
}

impl SceneKind {
    pub fn parse(name: &str) -> Result<SceneKind> {
        match name {
            "planes" => Ok(SceneKind::Planes),
            "steps" => Ok(SceneKind::SlantedSteps),
            "sinusoid" => Ok(SceneKind::Sinusoid),
            other => Err(Error::arg(format!("unknown scene kind '{other}'"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            SceneKind::Planes => "planes",
            SceneKind::SlantedSteps => "steps",
            SceneKind::Sinusoid => "sinusoid",
        }
    }
}

/// Generate a dense ground-truth depth map, deterministic in the seed.
pub fn synth_scene(seed: u64, h: usize, w: usize, kind: SceneKind) -> Result<Tensor> {
    if h < 16 || w < 16 {
        return Err(Error::arg(format!("scene needs at least 16x16, got {h}x{w}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut depth = Tensor::zeros(&[h, w]);
    match kind {
        SceneKind::Planes => {
            // Per-axis gradients bounded so each plane varies by at most
            // 4 m per axis across the image.
            let max_g = 4.0 / h.max(w) as f64;
            let base_a = rng.gen_range(25.0..45.0);
            let offset = rng.gen_range(15.0..25.0);
            let base_b = if base_a >= 40.0 {
                base_a - offset
            } else {
                base_a + offset
            };
            let grad = |rng: &mut ChaCha8Rng| {
                (
                    rng.gen_range(-max_g..max_g),
                    rng.gen_range(-max_g..max_g),
                )
            };
            let (gya, gxa) = grad(&mut rng);
            let (gyb, gxb) = grad(&mut rng);
            let vertical = rng.gen_bool(0.5);
            let split = if vertical {
                rng.gen_range(w / 4..3 * w / 4)
            } else {
                rng.gen_range(h / 4..3 * h / 4)
            };
            for y in 0..h {
                for x in 0..w {
                    let in_a = if vertical { x < split } else { y < split };
                    let v = if in_a {
                        base_a + gya * y as f64 + gxa * x as f64
                    } else {
                        base_b + gyb * y as f64 + gxb * x as f64
                    };
                    depth.set(&[y, x], v);
                }
            }
        }
        SceneKind::SlantedSteps => {
            let base = rng.gen_range(20.0..35.0);
            let slope_y = rng.gen_range(-0.05..0.05);
            let slope_x = rng.gen_range(-0.05..0.05);
            let step = rng.gen_range(6.0..9.0);
            let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            let band = (h / 4).max(1);
            for y in 0..h {
                let k = (y / band).min(3) as f64;
                for x in 0..w {
                    let v = base + slope_y * y as f64 + slope_x * x as f64 + sign * step * k;
                    depth.set(&[y, x], v);
                }
            }
        }
        SceneKind::Sinusoid => {
            let mid = rng.gen_range(15.0..30.0);
            let amp = rng.gen_range(2.0..4.0);
            let period = rng.gen_range(32.0..48.0);
            let (p1, p2) = (
                rng.gen_range(0.0..std::f64::consts::TAU),
                rng.gen_range(0.0..std::f64::consts::TAU),
            );
            let k = std::f64::consts::TAU / period;
            for y in 0..h {
                for x in 0..w {
                    let v = mid + amp * (k * x as f64 + p1).sin() * (k * y as f64 + p2).cos();
                    depth.set(&[y, x], v);
                }
            }
        }
    }
    debug_assert!(depth.min() >= 1.0 && depth.max() <= 80.0);
    Ok(depth)
}

/// Drop samples: keep each pixel independently with probability `density`.
/// Returns the sparse map (`dense * mask`) and the binary confidence mask.
pub fn sparsify(dense: &Tensor, density: f64, seed: u64) -> Result<(Tensor, Tensor)> {
    if !(density > 0.0 && density <= 1.0) {
        return Err(Error::arg(format!("density must be in (0, 1], got {density}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sparse = Tensor::zeros(dense.shape());
    let mut conf = Tensor::zeros(dense.shape());
    for i in 0..dense.len() {
        if rng.gen_bool(density) {
            sparse.data_mut()[i] = dense.data()[i];
            conf.data_mut()[i] = 1.0;
        }
    }
    Ok((sparse, conf))
}

/// Convenience: generate, sparsify, and package a scene.
pub fn make_scene(seed: u64, h: usize, w: usize, kind: SceneKind, density: f64) -> Result<Scene> {
    let ground_truth = synth_scene(seed, h, w, kind)?;
    let (sparse, confidence) = sparsify(&ground_truth, density, seed.wrapping_add(0x5eed))?;
    Ok(Scene {
        ground_truth,
        sparse,
        confidence,
        gt_valid: None,
    })
}

/// Write a 2-D tensor as binary 16-bit PGM (`P5`, maxval 65535,
/// big-endian samples). Stored count is `round(value / scale)`; values
/// whose count falls outside [0, 65535] are rejected.
pub fn write_pgm16(path: &Path, t: &Tensor, scale: f64) -> Result<()> {
    if t.rank() != 2 {
        return Err(Error::shape(format!(
            "PGM stores rank-2 maps, got {:?}",
            t.shape()
        )));
    }
    let (h, w) = (t.shape()[0], t.shape()[1]);
    let mut counts = Vec::with_capacity(h * w);
    for &v in t.data() {
        let c = (v / scale).round();
        if !(0.0..=65535.0).contains(&c) {
            return Err(Error::OutOfRange(format!(
                "value {v} maps to count {c}, outside [0, 65535] at scale {scale}"
            )));
        }
        counts.push(c as u16);
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(f, "P5\n{w} {h}\n65535\n")?;
    for c in counts {
        f.write_all(&c.to_be_bytes())?;
    }
    Ok(())
}

/// Read a binary 16-bit PGM written by [`write_pgm16`]; `value = count *
/// scale`. Comments (`#`) in the header are accepted.
pub fn read_pgm16(path: &Path, scale: f64) -> Result<Tensor> {
    let bytes = std::fs::read(path)?;
    let name = path.display().to_string();
    let mut pos = 0usize;

    let token = |bytes: &[u8], pos: &mut usize| -> Result<String> {
        // Skip whitespace and comments.
        loop {
            while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
                *pos += 1;
            }
            if *pos < bytes.len() && bytes[*pos] == b'#' {
                while *pos < bytes.len() && bytes[*pos] != b'\n' {
                    *pos += 1;
                }
                continue;
            }
            break;
        }
        let start = *pos;
        while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if start == *pos {
            return Err(Error::format(&name, "truncated header"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
    };

    if token(&bytes, &mut pos)? != "P5" {
        return Err(Error::format(&name, "not a binary PGM (magic must be P5)"));
    }
    let w: usize = token(&bytes, &mut pos)?
        .parse()
        .map_err(|_| Error::format(&name, "bad width"))?;
    let h: usize = token(&bytes, &mut pos)?
        .parse()
        .map_err(|_| Error::format(&name, "bad height"))?;
    let maxval: usize = token(&bytes, &mut pos)?
        .parse()
        .map_err(|_| Error::format(&name, "bad maxval"))?;
    if maxval != 65535 {
        return Err(Error::format(
            &name,
            format!("maxval must be 65535 for 16-bit maps, got {maxval}"),
        ));
    }
    // Exactly one whitespace byte separates the header from the payload.
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::format(&name, "missing header terminator"));
    }
    pos += 1;
    let need = w * h * 2;
    if bytes.len() - pos != need {
        return Err(Error::format(
            &name,
            format!("payload is {} bytes, expected {need}", bytes.len() - pos),
        ));
    }
    let data: Vec<f64> = bytes[pos..]
        .chunks_exact(2)
        .map(|b| u16::from_be_bytes([b[0], b[1]]) as f64 * scale)
        .collect();
    Tensor::from_vec(&[h, w], data)
}

/// Directory of one scene inside a dataset root: `scene_%04d`.
pub fn scene_dir(root: &Path, index: usize) -> PathBuf {
    root.join(format!("scene_{index:04}"))
}

/// Write `gt.pgm`, `sparse.pgm`, `conf.pgm` into `dir`.
pub fn save_scene(scene: &Scene, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_pgm16(&dir.join("gt.pgm"), &scene.ground_truth, DEPTH_SCALE)?;
    write_pgm16(&dir.join("sparse.pgm"), &scene.sparse, DEPTH_SCALE)?;
    write_pgm16(&dir.join("conf.pgm"), &scene.confidence, CONF_SCALE)?;
    Ok(())
}

pub fn load_scene(dir: &Path) -> Result<Scene> {
    Ok(Scene {
        ground_truth: read_pgm16(&dir.join("gt.pgm"), DEPTH_SCALE)?,
        sparse: read_pgm16(&dir.join("sparse.pgm"), DEPTH_SCALE)?,
        confidence: read_pgm16(&dir.join("conf.pgm"), CONF_SCALE)?,
        gt_valid: None,
    })
}

/// Load every `scene_*` directory under `root`, sorted by name.
pub fn load_dataset(root: &Path) -> Result<Vec<Scene>> {
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(root)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| {
            p.is_dir()
                && p.file_name()
                    .and_then(|n| n.to_str())
                    .is_some_and(|n| n.starts_with("scene_"))
        })
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::arg(format!(
            "no scene_* directories under {}",
            root.display()
        )));
    }
    dirs.iter().map(|d| load_scene(d)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn planes_have_a_hard_edge() {
        for seed in 0..10 {
            let d = synth_scene(seed, 32, 32, SceneKind::Planes).unwrap();
            assert!(d.min() >= 1.0 && d.max() <= 80.0);
            // Largest neighbor jump along rows or columns.
            let mut max_jump = 0.0f64;
            for y in 0..32 {
                for x in 0..31 {
                    max_jump = max_jump.max((d.at(&[y, x + 1]) - d.at(&[y, x])).abs());
                    max_jump = max_jump.max((d.at(&[x + 1, y]) - d.at(&[x, y])).abs());
                }
            }
            assert!(max_jump >= 5.0, "seed {seed}: max jump {max_jump}");
        }
    }

    #[test]
    fn scenes_are_deterministic_in_the_seed() {
        for kind in [SceneKind::Planes, SceneKind::SlantedSteps, SceneKind::Sinusoid] {
            let a = synth_scene(42, 24, 20, kind).unwrap();
            let b = synth_scene(42, 24, 20, kind).unwrap();
            assert_eq!(a, b);
            let c = synth_scene(43, 24, 20, kind).unwrap();
            assert_ne!(a, c);
        }
    }

    #[test]
    fn sinusoid_is_smooth() {
        for seed in 0..10 {
            let d = synth_scene(seed, 32, 32, SceneKind::Sinusoid).unwrap();
            assert!(d.min() >= 1.0 && d.max() <= 80.0);
            for y in 0..32 {
                for x in 0..31 {
                    assert!((d.at(&[y, x + 1]) - d.at(&[y, x])).abs() < 1.0);
                    assert!((d.at(&[x + 1, y]) - d.at(&[x, y])).abs() < 1.0);
                }
            }
        }
    }

    #[test]
    fn steps_stay_in_range() {
        for seed in 0..10 {
            let d = synth_scene(seed, 32, 32, SceneKind::SlantedSteps).unwrap();
            assert!(d.min() >= 1.0 && d.max() <= 80.0);
        }
    }

    #[test]
    fn tiny_scenes_are_rejected() {
        assert!(synth_scene(0, 8, 32, SceneKind::Planes).is_err());
    }

    #[test]
    fn full_density_keeps_everything() {
        let d = synth_scene(1, 16, 16, SceneKind::Sinusoid).unwrap();
        let (sparse, conf) = sparsify(&d, 1.0, 9).unwrap();
        assert_eq!(sparse, d);
        assert!(conf.data().iter().all(|&c| c == 1.0));
    }

    #[test]
    fn sample_count_within_binomial_bounds() {
        let d = synth_scene(2, 64, 64, SceneKind::Planes).unwrap();
        let (_, conf) = sparsify(&d, 0.05, 7).unwrap();
        let kept = conf.sum();
        // n = 4096, p = 0.05: mean 204.8, sigma = sqrt(n p (1-p)) = 13.95.
        let n = 4096.0f64;
        let mean = n * 0.05;
        let sigma = (n * 0.05 * 0.95).sqrt();
        assert!(
            (kept - mean).abs() <= 3.0 * sigma,
            "kept {kept}, expected {mean} +- {}",
            3.0 * sigma
        );
    }

    #[test]
    fn sparsify_is_deterministic_and_consistent() {
        let d = synth_scene(3, 20, 20, SceneKind::Planes).unwrap();
        let (s1, c1) = sparsify(&d, 0.2, 11).unwrap();
        let (s2, c2) = sparsify(&d, 0.2, 11).unwrap();
        assert_eq!(s1, s2);
        assert_eq!(c1, c2);
        // Masking the ground truth reproduces the sparse map exactly.
        let masked = d.mul(&c1).unwrap();
        assert_eq!(masked, s1);
    }

    fn tmp(name: &str) -> PathBuf {
        std::env::temp_dir().join(format!("nconv_data_{}_{name}", std::process::id()))
    }

    #[test]
    fn pgm_round_trip_is_bit_exact() {
        use rand::{Rng, SeedableRng};
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        // Representable values: integer counts times the scale.
        let t = Tensor::from_vec(
            &[6, 5],
            (0..30)
                .map(|_| rng.gen_range(0..=65535u32) as f64 * DEPTH_SCALE)
                .collect(),
        )
        .unwrap();
        let path = tmp("roundtrip.pgm");
        write_pgm16(&path, &t, DEPTH_SCALE).unwrap();
        let back = read_pgm16(&path, DEPTH_SCALE).unwrap();
        assert_eq!(back, t);
        // Second write produces byte-identical files.
        let bytes1 = std::fs::read(&path).unwrap();
        write_pgm16(&path, &back, DEPTH_SCALE).unwrap();
        let bytes2 = std::fs::read(&path).unwrap();
        assert_eq!(bytes1, bytes2);
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn ten_meters_stores_count_2560() {
        let t = Tensor::from_vec(&[1, 1], vec![10.0]).unwrap();
        let path = tmp("count.pgm");
        write_pgm16(&path, &t, DEPTH_SCALE).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let payload = &bytes[bytes.len() - 2..];
        assert_eq!(u16::from_be_bytes([payload[0], payload[1]]), 2560);
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn out_of_range_values_are_rejected() {
        let t = Tensor::from_vec(&[1, 1], vec![300.0]).unwrap();
        let path = tmp("range.pgm");
        match write_pgm16(&path, &t, DEPTH_SCALE) {
            Err(Error::OutOfRange(msg)) => assert!(msg.contains("76800")),
            other => panic!("expected OutOfRange, got {other:?}"),
        }
        let neg = Tensor::from_vec(&[1, 1], vec![-0.5]).unwrap();
        assert!(write_pgm16(&path, &neg, DEPTH_SCALE).is_err());
    }

    #[test]
    fn malformed_headers_are_rejected() {
        let path = tmp("bad.pgm");
        std::fs::write(&path, b"P6\n2 2\n65535\n").unwrap();
        assert!(read_pgm16(&path, DEPTH_SCALE).is_err());
        std::fs::write(&path, b"P5\n2 2\n255\n").unwrap();
        assert!(read_pgm16(&path, DEPTH_SCALE).is_err());
        std::fs::write(&path, b"P5\n2 2\n65535\n\x00\x01").unwrap();
        assert!(read_pgm16(&path, DEPTH_SCALE).is_err(), "short payload");
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn scene_directory_round_trip() {
        let scene = make_scene(5, 16, 16, SceneKind::Planes, 0.1).unwrap();
        let root = tmp("dataset");
        let dir = scene_dir(&root, 0);
        save_scene(&scene, &dir).unwrap();
        let back = load_scene(&dir).unwrap();
        // Depth values are multiples of no particular scale, so compare at
        // quantization accuracy.
        for (a, b) in scene.ground_truth.data().iter().zip(back.ground_truth.data()) {
            assert!((a - b).abs() <= DEPTH_SCALE / 2.0 + 1e-12);
        }
        assert_eq!(back.confidence, scene.confidence);
        let all = load_dataset(&root).unwrap();
        assert_eq!(all.len(), 1);
        std::fs::remove_dir_all(&root).ok();
    }
}
