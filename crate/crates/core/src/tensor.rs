//! Minimal dense multi-dimensional array of `f64` plus the handful of
//! kernels the rest of the crate needs: padding, same-size sliding-window
//! correlation, elementwise arithmetic and reductions.
//!
//! Layout is always contiguous row-major (last axis fastest). There is no
//! broadcasting and there are no views; operations copy. Values are treated
//! as immutable once constructed, so everything here is a pure function and
//! safe to call concurrently.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// How [`pad`](Tensor::pad) fills the margin.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PadMode {
    /// Fill with zeros.
    Zero,
    /// Copy the nearest edge value.
    Replicate,
}

/// Dense N-dimensional array, row-major `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// All-zero tensor of the given shape.
    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    /// Constant-filled tensor.
    pub fn full(shape: &[usize], value: f64) -> Tensor {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    /// Wrap an existing row-major buffer. Errors if the length does not
    /// match the product of extents.
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(format!(
                "shape {:?} needs {} values, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    /// Reinterpret the same buffer under a new shape of equal size.
    pub fn reshape(mut self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} ({} values) to {:?}",
                self.shape,
                self.data.len(),
                shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Flat offset of a multi-index.
    pub fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        let mut off = 0;
        for (i, &ix) in index.iter().enumerate() {
            debug_assert!(ix < self.shape[i]);
            off = off * self.shape[i] + ix;
        }
        off
    }

    pub fn at(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let off = self.offset(index);
        self.data[off] = value;
    }

    /// Borrow one channel of a `[channels, h, w]` tensor as a flat `h*w` slice.
    pub fn channel(&self, ch: usize) -> &[f64] {
        assert_eq!(self.rank(), 3, "channel() needs a [c,h,w] tensor");
        let plane = self.shape[1] * self.shape[2];
        &self.data[ch * plane..(ch + 1) * plane]
    }

    pub fn channel_mut(&mut self, ch: usize) -> &mut [f64] {
        assert_eq!(self.rank(), 3, "channel_mut() needs a [c,h,w] tensor");
        let plane = self.shape[1] * self.shape[2];
        &mut self.data[ch * plane..(ch + 1) * plane]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// Elementwise combination of two equally shaped tensors.
    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "zip_map on {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|x| x * s)
    }

    /// In-place `self += other`, shapes must match.
    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "add_assign on {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn min(&self) -> f64 {
        self.data.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Pad each axis by `(before, after)` margins.
    ///
    /// The margin list must have one pair per axis. `Zero` fills 0.0,
    /// `Replicate` copies the nearest edge value.
    pub fn pad(&self, margins: &[(usize, usize)], mode: PadMode) -> Result<Tensor> {
        if margins.len() != self.rank() {
            return Err(Error::arg(format!(
                "pad margins have {} entries for rank-{} tensor",
                margins.len(),
                self.rank()
            )));
        }
        let out_shape: Vec<usize> = self
            .shape
            .iter()
            .zip(margins)
            .map(|(&n, &(b, a))| n + b + a)
            .collect();
        let mut out = Tensor::zeros(&out_shape);
        if self.data.is_empty() {
            return Ok(out);
        }
        let rank = self.rank();
        let mut idx = vec![0usize; rank];
        let mut src = vec![0usize; rank];
        'outer: loop {
            // Map the output index onto the source grid; `None` marks a
            // zero-fill position.
            let mut inside = true;
            for d in 0..rank {
                let i = idx[d] as isize - margins[d].0 as isize;
                let n = self.shape[d] as isize;
                if i < 0 || i >= n {
                    inside = false;
                    src[d] = i.clamp(0, n - 1) as usize;
                } else {
                    src[d] = i as usize;
                }
            }
            if inside || mode == PadMode::Replicate {
                let v = self.at(&src);
                let off = out.offset(&idx);
                out.data[off] = v;
            }
            // Odometer increment over the output grid.
            for d in (0..rank).rev() {
                idx[d] += 1;
                if idx[d] < out_shape[d] {
                    continue 'outer;
                }
                idx[d] = 0;
            }
            break;
        }
        Ok(out)
    }

    /// Remove `(before, after)` margins per axis; inverse of [`pad`](Tensor::pad).
    pub fn crop(&self, margins: &[(usize, usize)]) -> Result<Tensor> {
        if margins.len() != self.rank() {
            return Err(Error::arg(format!(
                "crop margins have {} entries for rank-{} tensor",
                margins.len(),
                self.rank()
            )));
        }
        let out_shape: Vec<usize> = self
            .shape
            .iter()
            .zip(margins)
            .map(|(&n, &(b, a))| {
                n.checked_sub(b + a)
                    .expect("crop margins exceed tensor extent")
            })
            .collect();
        let mut out = Tensor::zeros(&out_shape);
        let rank = self.rank();
        if out.data.is_empty() {
            return Ok(out);
        }
        let mut idx = vec![0usize; rank];
        let mut src = vec![0usize; rank];
        'outer: loop {
            for d in 0..rank {
                src[d] = idx[d] + margins[d].0;
            }
            let off = out.offset(&idx);
            out.data[off] = self.at(&src);
            for d in (0..rank).rev() {
                idx[d] += 1;
                if idx[d] < out_shape[d] {
                    continue 'outer;
                }
                idx[d] = 0;
            }
            break;
        }
        Ok(out)
    }

    /// Same-size 2-D sliding-window correlation with an odd-sized kernel:
    ///
    ///   out[i,j] = sum_{m,n} padded[i+m, j+n] * k[m,n]
    ///
    /// The input is padded by half the kernel extent on each side according
    /// to `mode`, so the output has the input's shape. Even kernel extents
    /// are rejected.
    pub fn correlate2d(&self, kernel: &Tensor, mode: PadMode) -> Result<Tensor> {
        if self.rank() != 2 || kernel.rank() != 2 {
            return Err(Error::shape(format!(
                "correlate2d needs rank-2 tensors, got {:?} and {:?}",
                self.shape,
                kernel.shape()
            )));
        }
        let (kh, kw) = (kernel.shape[0], kernel.shape[1]);
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::arg(format!(
                "correlate2d kernel extents must be odd, got {}x{}",
                kh, kw
            )));
        }
        let (h, w) = (self.shape[0], self.shape[1]);
        let padded = self.pad(&[(kh / 2, kh / 2), (kw / 2, kw / 2)], mode)?;
        let mut out = vec![0.0; h * w];
        correlate2d_valid(padded.data(), h, w, kernel.data(), kh, kw, &mut out, false);
        Tensor::from_vec(&[h, w], out)
    }

    /// Rotate a 2-D kernel by 180 degrees (used for gradient transposes).
    pub fn rot180(&self) -> Tensor {
        assert_eq!(self.rank(), 2, "rot180 needs a rank-2 tensor");
        let mut data = self.data.clone();
        data.reverse();
        Tensor {
            shape: self.shape.clone(),
            data,
        }
    }

    /// Write in the `NCT1` container: magic `NCT1`, little-endian `u32`
    /// rank, rank little-endian `u64` extents, then the row-major f64
    /// payload in little-endian order.
    pub fn write_nct<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(b"NCT1")?;
        w.write_all(&(self.rank() as u32).to_le_bytes())?;
        for &e in &self.shape {
            w.write_all(&(e as u64).to_le_bytes())?;
        }
        for &v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    /// Read a tensor from the `NCT1` container.
    pub fn read_nct<R: Read>(mut r: R, path: &str) -> Result<Tensor> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|_| Error::format(path, "truncated magic"))?;
        if &magic != b"NCT1" {
            return Err(Error::format(path, "bad magic, expected NCT1"));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)
            .map_err(|_| Error::format(path, "truncated rank"))?;
        let rank = u32::from_le_bytes(b4) as usize;
        if rank > 8 {
            return Err(Error::format(path, format!("implausible rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        let mut b8 = [0u8; 8];
        for _ in 0..rank {
            r.read_exact(&mut b8)
                .map_err(|_| Error::format(path, "truncated extents"))?;
            shape.push(u64::from_le_bytes(b8) as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            r.read_exact(&mut b8)
                .map_err(|_| Error::format(path, "truncated payload"))?;
            data.push(f64::from_le_bytes(b8));
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(Error::format(path, "trailing bytes after payload"));
        }
        Tensor::from_vec(&shape, data)
    }

    pub fn save_nct(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_nct(std::io::BufWriter::new(f))
    }

    pub fn load_nct(path: &Path) -> Result<Tensor> {
        let f = std::fs::File::open(path)?;
        Tensor::read_nct(std::io::BufReader::new(f), &path.display().to_string())
    }
}

/// Correlation of a pre-padded plane against a kernel, writing an `h x w`
/// output. `padded` must be `(h+kh-1) x (w+kw-1)`. With `accumulate` the
/// result is added onto `out` instead of overwriting it.
///
/// Accumulation over the kernel window runs in a fixed left-to-right,
/// top-to-bottom order per output element, so results are deterministic.
pub(crate) fn correlate2d_valid(
    padded: &[f64],
    h: usize,
    w: usize,
    kernel: &[f64],
    kh: usize,
    kw: usize,
    out: &mut [f64],
    accumulate: bool,
) {
    let pw = w + kw - 1;
    debug_assert_eq!(padded.len(), (h + kh - 1) * pw);
    debug_assert_eq!(out.len(), h * w);
    for i in 0..h {
        for j in 0..w {
            let mut acc = 0.0;
            for m in 0..kh {
                let row = &padded[(i + m) * pw + j..(i + m) * pw + j + kw];
                let krow = &kernel[m * kw..m * kw + kw];
                for n in 0..kw {
                    acc += row[n] * krow[n];
                }
            }
            let o = &mut out[i * w + j];
            if accumulate {
                *o += acc;
            } else {
                *o = acc;
            }
        }
    }
}

/// Zero-pad a flat `h x w` plane by half-kernel margins.
pub(crate) fn zero_pad_plane(plane: &[f64], h: usize, w: usize, kh: usize, kw: usize) -> Vec<f64> {
    let (ph, pw) = (h + kh - 1, w + kw - 1);
    let mut out = vec![0.0; ph * pw];
    for i in 0..h {
        let dst = (i + kh / 2) * pw + kw / 2;
        out[dst..dst + w].copy_from_slice(&plane[i * w..(i + 1) * w]);
    }
    out
}

/// For each kernel tap (m, n), the inner product of `grad` (h x w) with the
/// shifted window of `padded`; this is the gradient of a same-size
/// correlation with respect to its kernel. Accumulates onto `out` (kh*kw).
pub(crate) fn correlate_kernel_grad(
    padded: &[f64],
    h: usize,
    w: usize,
    grad: &[f64],
    kh: usize,
    kw: usize,
    out: &mut [f64],
) {
    let pw = w + kw - 1;
    debug_assert_eq!(out.len(), kh * kw);
    for m in 0..kh {
        for n in 0..kw {
            let mut acc = 0.0;
            for i in 0..h {
                let row = &padded[(i + m) * pw + n..(i + m) * pw + n + w];
                let grow = &grad[i * w..(i + 1) * w];
                for j in 0..w {
                    acc += row[j] * grow[j];
                }
            }
            out[m * kw + n] += acc;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t1(v: &[f64]) -> Tensor {
        Tensor::from_vec(&[v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn pad_zero_fills_zeros() {
        let t = t1(&[1.0, 2.0, 3.0]);
        let p = t.pad(&[(1, 1)], PadMode::Zero).unwrap();
        assert_eq!(p.data(), &[0.0, 1.0, 2.0, 3.0, 0.0]);
    }

    #[test]
    fn pad_replicate_copies_edges() {
        let t = t1(&[1.0, 2.0, 3.0]);
        let p = t.pad(&[(1, 1)], PadMode::Replicate).unwrap();
        assert_eq!(p.data(), &[1.0, 1.0, 2.0, 3.0, 3.0]);
    }

    #[test]
    fn pad_zero_margins_is_identity() {
        let t = Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let p = t.pad(&[(0, 0), (0, 0)], PadMode::Zero).unwrap();
        assert_eq!(p, t);
    }

    #[test]
    fn pad_rejects_wrong_margin_count() {
        let t = Tensor::zeros(&[2, 2]);
        assert!(t.pad(&[(1, 1)], PadMode::Zero).is_err());
    }

    #[test]
    fn correlate_ones_center_is_window_sum() {
        let t = Tensor::full(&[3, 3], 1.0);
        let k = Tensor::full(&[3, 3], 1.0);
        let out = t.correlate2d(&k, PadMode::Zero).unwrap();
        assert_eq!(out.at(&[1, 1]), 9.0);
        // Corner sees a 2x2 live window.
        assert_eq!(out.at(&[0, 0]), 4.0);
    }

    #[test]
    fn correlate_identity_kernel() {
        let t = Tensor::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let k = Tensor::from_vec(&[1, 1], vec![1.0]).unwrap();
        let out = t.correlate2d(&k, PadMode::Zero).unwrap();
        assert_eq!(out, t);
    }

    #[test]
    fn correlate_rejects_even_kernel() {
        let t = Tensor::zeros(&[4, 4]);
        let k = Tensor::zeros(&[2, 3]);
        assert!(t.correlate2d(&k, PadMode::Zero).is_err());
    }

    /// Independent nested-loop reference for the same-size zero-padded
    /// correlation; deliberately written without any of the crate kernels.
    fn naive_correlate(t: &Tensor, k: &Tensor) -> Tensor {
        let (h, w) = (t.shape()[0], t.shape()[1]);
        let (kh, kw) = (k.shape()[0], k.shape()[1]);
        let mut out = Tensor::zeros(&[h, w]);
        for i in 0..h as isize {
            for j in 0..w as isize {
                let mut acc = 0.0;
                for m in 0..kh as isize {
                    for n in 0..kw as isize {
                        let y = i + m - (kh as isize) / 2;
                        let x = j + n - (kw as isize) / 2;
                        if y >= 0 && y < h as isize && x >= 0 && x < w as isize {
                            acc += t.at(&[y as usize, x as usize]) * k.at(&[m as usize, n as usize]);
                        }
                    }
                }
                out.set(&[i as usize, j as usize], acc);
            }
        }
        out
    }

    #[test]
    fn correlate_matches_naive_reference() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let t = Tensor::from_vec(
                &[5, 5],
                (0..25).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            )
            .unwrap();
            let k = Tensor::from_vec(
                &[3, 3],
                (0..9).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            )
            .unwrap();
            let fast = t.correlate2d(&k, PadMode::Zero).unwrap();
            let slow = naive_correlate(&t, &k);
            for (a, b) in fast.data().iter().zip(slow.data()) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn correlate_is_linear() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let mut rand_t = |n: usize| {
            Tensor::from_vec(
                &[6, 6],
                (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect(),
            )
            .unwrap()
        };
        let t1 = rand_t(36);
        let t2 = rand_t(36);
        let k = Tensor::from_vec(&[3, 3], (0..9).map(|i| (i as f64) - 4.0).collect()).unwrap();
        let (a, b) = (1.75, -0.5);
        let lhs = t1
            .scale(a)
            .add(&t2.scale(b))
            .unwrap()
            .correlate2d(&k, PadMode::Zero)
            .unwrap();
        let rhs = t1
            .correlate2d(&k, PadMode::Zero)
            .unwrap()
            .scale(a)
            .add(&t2.correlate2d(&k, PadMode::Zero).unwrap().scale(b))
            .unwrap();
        for (x, y) in lhs.data().iter().zip(rhs.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn nct_round_trip() {
        let t = Tensor::from_vec(&[2, 1, 3], vec![0.5, -1.25, 3.0, 4.5, -6.0, 7.125]).unwrap();
        let mut buf = Vec::new();
        t.write_nct(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"NCT1");
        let back = Tensor::read_nct(buf.as_slice(), "mem").unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn nct_rejects_bad_magic() {
        let bad = b"XXXX\x01\x00\x00\x00".to_vec();
        assert!(Tensor::read_nct(bad.as_slice(), "mem").is_err());
    }

    proptest! {
        #[test]
        fn pad_then_crop_is_identity(
            h in 1usize..6, w in 1usize..6,
            mb in 0usize..3, ma in 0usize..3,
            nb in 0usize..3, na in 0usize..3,
            replicate in proptest::bool::ANY,
            seed in 0u64..1000,
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let t = Tensor::from_vec(&[h, w], (0..h * w).map(|_| rng.gen_range(-5.0..5.0)).collect()).unwrap();
            let mode = if replicate { PadMode::Replicate } else { PadMode::Zero };
            let margins = [(mb, ma), (nb, na)];
            let back = t.pad(&margins, mode).unwrap().crop(&margins).unwrap();
            prop_assert_eq!(back, t);
        }

        #[test]
        fn nct_survives_arbitrary_payload(values in proptest::collection::vec(-1e6f64..1e6, 1..40)) {
            let t = Tensor::from_vec(&[values.len()], values).unwrap();
            let mut buf = Vec::new();
            t.write_nct(&mut buf).unwrap();
            let back = Tensor::read_nct(buf.as_slice(), "mem").unwrap();
            prop_assert_eq!(back, t);
        }
    }
}
