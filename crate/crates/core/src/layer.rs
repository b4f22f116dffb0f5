//! The trainable normalized-convolution layer.
//!
//! Raw weights are passed through a differentiable non-negativity transform
//! so the effective filter is a valid applicability. The data forward pass
//! for output channel `o` at pixel `(i,j)` is the stabilized quotient
//!
//!   z_out = sum(z_in . c_in . A) / (sum(c_in . A) + eps) + b
//!
//! with `A = gamma(W)`, both sums running over the kernel window and all
//! input channels (one joint normalization per output channel). Output
//! confidence reuses the denominator:
//!
//!   c_out = (sum(c_in . A) + eps) / sum(A)
//!
//! The backward pass is derived by hand through the quotient rule and flows
//! through BOTH the data and the confidence paths, because the training
//! loss depends on the final confidence map. Gradients with respect to the
//! raw weights pick up the extra `gamma'(W)` chain-rule factor.
//!
//! Boundary handling zero-pads data and confidence alike: a padded sample
//! carries zero confidence and therefore ignores itself.

use std::fmt;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{correlate2d_valid, correlate_kernel_grad, zero_pad_plane, Tensor};

/// Differentiable map with non-negative co-domain applied to raw weights.
///
/// `Identity` deliberately breaks the non-negativity guarantee; it exists
/// only to reproduce the unconstrained ablation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NonNeg {
    SoftPlus { beta: f64 },
    Exponential,
    Sigmoid,
    Identity,
}

impl NonNeg {
    /// Evaluate the transform, overflow-safe.
    pub fn eval(&self, x: f64) -> f64 {
        match *self {
            NonNeg::SoftPlus { beta } => {
                let bx = beta * x;
                if bx > 30.0 {
                    // log(1+e^bx)/beta = x + log1p(e^-bx)/beta; the second
                    // term is below 1e-13 here.
                    x + (-bx).exp() / beta
                } else {
                    (bx).exp().ln_1p() / beta
                }
            }
            NonNeg::Exponential => x.exp(),
            NonNeg::Sigmoid => 1.0 / (1.0 + (-x).exp()),
            NonNeg::Identity => x,
        }
    }

    /// First derivative of the transform.
    pub fn derivative(&self, x: f64) -> f64 {
        match *self {
            NonNeg::SoftPlus { beta } => 1.0 / (1.0 + (-beta * x).exp()),
            NonNeg::Exponential => x.exp(),
            NonNeg::Sigmoid => {
                let s = 1.0 / (1.0 + (-x).exp());
                s * (1.0 - s)
            }
            NonNeg::Identity => 1.0,
        }
    }

    pub fn eval_tensor(&self, t: &Tensor) -> Tensor {
        t.map(|x| self.eval(x))
    }

    pub fn parse(name: &str, beta: f64) -> Result<NonNeg> {
        match name {
            "softplus" => {
                if beta <= 0.0 {
                    return Err(Error::arg(format!("softplus beta must be positive, got {beta}")));
                }
                Ok(NonNeg::SoftPlus { beta })
            }
            "exponential" => Ok(NonNeg::Exponential),
            "sigmoid" => Ok(NonNeg::Sigmoid),
            "identity" => Ok(NonNeg::Identity),
            other => Err(Error::arg(format!("unknown non-negativity kind '{other}'"))),
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            NonNeg::SoftPlus { .. } => "softplus",
            NonNeg::Exponential => "exponential",
            NonNeg::Sigmoid => "sigmoid",
            NonNeg::Identity => "identity",
        }
    }
}

impl fmt::Display for NonNeg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NonNeg::SoftPlus { beta } => write!(f, "softplus(beta={beta})"),
            _ => write!(f, "{}", self.kind_name()),
        }
    }
}

/// How a layer produces its output confidence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConfRule {
    /// Denominator of the data quotient normalized by the kernel sum.
    Normalized,
    /// Window maximum of the input confidence; the fallback used by the
    /// unconstrained ablation, where the kernel sum may be non-positive.
    WindowMax,
}

impl ConfRule {
    pub fn parse(name: &str) -> Result<ConfRule> {
        match name {
            "normalized" => Ok(ConfRule::Normalized),
            "window_max" => Ok(ConfRule::WindowMax),
            other => Err(Error::arg(format!("unknown confidence rule '{other}'"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ConfRule::Normalized => "normalized",
            ConfRule::WindowMax => "window_max",
        }
    }
}

/// Paired data and confidence maps of identical `[channels, h, w]` shape —
/// the unit flowing through the network.
#[derive(Debug, Clone)]
pub struct ConfSignal {
    pub z: Tensor,
    pub c: Tensor,
}

impl ConfSignal {
    pub fn new(z: Tensor, c: Tensor) -> Result<ConfSignal> {
        if z.shape() != c.shape() {
            return Err(Error::shape(format!(
                "data {:?} vs confidence {:?}",
                z.shape(),
                c.shape()
            )));
        }
        if z.rank() != 3 {
            return Err(Error::shape(format!(
                "signals are [channels, h, w], got {:?}",
                z.shape()
            )));
        }
        if c.data().iter().any(|&v| v < 0.0) {
            return Err(Error::arg("confidence must be non-negative"));
        }
        Ok(ConfSignal { z, c })
    }

    /// Single-channel signal from two 2-D maps.
    pub fn from_maps(z: Tensor, c: Tensor) -> Result<ConfSignal> {
        let (h, w) = (z.shape()[0], z.shape()[1]);
        ConfSignal::new(z.reshape(&[1, h, w])?, c.reshape(&[1, h, w])?)
    }

    pub fn channels(&self) -> usize {
        self.z.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.z.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.z.shape()[2]
    }
}

/// One trainable normalized-convolution unit, stride fixed at 1.
#[derive(Debug, Clone)]
pub struct NConvLayer {
    /// Raw (unconstrained) weights, `[out_ch, in_ch, kh, kw]`.
    pub weights: Tensor,
    /// Per-output-channel bias, added after the normalization quotient and
    /// excluded from the confidence path.
    pub bias: Vec<f64>,
    pub gamma: NonNeg,
    /// Stabilizer added to the quotient denominator. Must be positive for
    /// training; tests may set it to 0.0 directly for exact oracle
    /// comparisons (zero-denominator pixels then divide 0/0).
    pub epsilon: f64,
    pub conf_rule: ConfRule,
}

/// Everything the backward pass needs from a forward call.
pub struct ForwardCache {
    input: ConfSignal,
    applicability: Tensor,
    kernel_sums: Vec<f64>,
    numer: Tensor,
    denom: Tensor,
    zc_pad: Vec<Vec<f64>>,
    c_pad: Vec<Vec<f64>>,
    /// For `WindowMax`: per output pixel, the input-coordinate argmax of
    /// the window confidence, or `None` when a zero padding cell won.
    winmax_arg: Option<Vec<Option<(usize, usize, usize)>>>,
}

/// Gradients produced by [`NConvLayer::backward`].
pub struct LayerBackward {
    pub grad_in_z: Tensor,
    pub grad_in_c: Tensor,
    pub grad_w: Tensor,
    pub grad_b: Vec<f64>,
}

impl NConvLayer {
    /// Validating constructor from explicit parts.
    pub fn from_parts(
        weights: Tensor,
        bias: Vec<f64>,
        gamma: NonNeg,
        epsilon: f64,
        conf_rule: ConfRule,
    ) -> Result<NConvLayer> {
        if weights.rank() != 4 {
            return Err(Error::shape(format!(
                "weights are [out, in, kh, kw], got {:?}",
                weights.shape()
            )));
        }
        let (out_ch, kh, kw) = (weights.shape()[0], weights.shape()[2], weights.shape()[3]);
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::arg(format!(
                "kernel extents must be odd, got {kh}x{kw}"
            )));
        }
        if bias.len() != out_ch {
            return Err(Error::shape(format!(
                "{} bias entries for {} output channels",
                bias.len(),
                out_ch
            )));
        }
        if epsilon <= 0.0 {
            return Err(Error::arg(format!("epsilon must be positive, got {epsilon}")));
        }
        Ok(NConvLayer {
            weights,
            bias,
            gamma,
            epsilon,
            conf_rule,
        })
    }

    /// Random initialization: raw weights uniform in [-1, 1], then shifted
    /// per output channel so the transformed kernel sums to 1, keeping
    /// initial outputs in the data range. Bias starts at zero.
    pub fn init<R: Rng>(
        out_ch: usize,
        in_ch: usize,
        kh: usize,
        kw: usize,
        gamma: NonNeg,
        epsilon: f64,
        conf_rule: ConfRule,
        rng: &mut R,
    ) -> Result<NConvLayer> {
        let per_out = in_ch * kh * kw;
        let mut data = Vec::with_capacity(out_ch * per_out);
        for _ in 0..out_ch {
            let raw: Vec<f64> = (0..per_out).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let shift = unit_sum_shift(&raw, gamma);
            data.extend(raw.iter().map(|w| w + shift));
        }
        NConvLayer::from_parts(
            Tensor::from_vec(&[out_ch, in_ch, kh, kw], data)?,
            vec![0.0; out_ch],
            gamma,
            epsilon,
            conf_rule,
        )
    }

    pub fn out_channels(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn kernel(&self) -> (usize, usize) {
        (self.weights.shape()[2], self.weights.shape()[3])
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    /// Effective filter bank `gamma(W)`.
    pub fn applicability(&self) -> Tensor {
        self.gamma.eval_tensor(&self.weights)
    }

    /// Per-output-channel sums of the effective filter. In `Identity` mode
    /// the sum can reach zero, so a 1e-12 floor guards the confidence
    /// normalizer; all other transforms are strictly positive.
    fn kernel_sums(&self, applicability: &Tensor) -> Vec<f64> {
        let per_out = self.in_channels() * self.weights.shape()[2] * self.weights.shape()[3];
        (0..self.out_channels())
            .map(|o| {
                let s: f64 = applicability.data()[o * per_out..(o + 1) * per_out]
                    .iter()
                    .sum();
                if s.abs() < 1e-12 {
                    1e-12
                } else {
                    s
                }
            })
            .collect()
    }

    /// Forward pass; returns the output signal and the cache consumed by
    /// [`backward`](NConvLayer::backward).
    pub fn forward(&self, input: &ConfSignal) -> Result<(ConfSignal, ForwardCache)> {
        let in_ch = self.in_channels();
        if input.channels() != in_ch {
            return Err(Error::shape(format!(
                "layer expects {} input channels, got {}",
                in_ch,
                input.channels()
            )));
        }
        let (h, w) = (input.height(), input.width());
        let (kh, kw) = self.kernel();
        let out_ch = self.out_channels();
        let applicability = self.applicability();
        let kernel_sums = self.kernel_sums(&applicability);
        let ktaps = kh * kw;

        let mut zc_pad = Vec::with_capacity(in_ch);
        let mut c_pad = Vec::with_capacity(in_ch);
        for i in 0..in_ch {
            let z = input.z.channel(i);
            let c = input.c.channel(i);
            let zc: Vec<f64> = z.iter().zip(c).map(|(a, b)| a * b).collect();
            zc_pad.push(zero_pad_plane(&zc, h, w, kh, kw));
            c_pad.push(zero_pad_plane(c, h, w, kh, kw));
        }

        let mut numer = Tensor::zeros(&[out_ch, h, w]);
        let mut denom = Tensor::zeros(&[out_ch, h, w]);
        for o in 0..out_ch {
            for i in 0..in_ch {
                let k = &applicability.data()[(o * in_ch + i) * ktaps..(o * in_ch + i + 1) * ktaps];
                correlate2d_valid(&zc_pad[i], h, w, k, kh, kw, numer.channel_mut(o), true);
                correlate2d_valid(&c_pad[i], h, w, k, kh, kw, denom.channel_mut(o), true);
            }
        }

        let mut out_z = Tensor::zeros(&[out_ch, h, w]);
        let mut out_c = Tensor::zeros(&[out_ch, h, w]);
        for o in 0..out_ch {
            let b = self.bias[o];
            let zc = out_z.channel_mut(o);
            for (v, (&n, &d)) in zc
                .iter_mut()
                .zip(numer.channel(o).iter().zip(denom.channel(o)))
            {
                *v = n / (d + self.epsilon) + b;
            }
        }

        let winmax_arg = match self.conf_rule {
            ConfRule::Normalized => {
                for o in 0..out_ch {
                    let sum = kernel_sums[o];
                    let cc = out_c.channel_mut(o);
                    for (v, &d) in cc.iter_mut().zip(denom.channel(o)) {
                        *v = (d + self.epsilon) / sum;
                    }
                }
                None
            }
            ConfRule::WindowMax => {
                // Window max over all input channels; identical for every
                // output channel. Ties resolve to the first occurrence in
                // (channel, row, column) order.
                let mut arg: Vec<Option<(usize, usize, usize)>> = vec![None; h * w];
                let mut best = vec![0.0f64; h * w];
                let pw = w + kw - 1;
                for i in 0..in_ch {
                    for y in 0..h {
                        for x in 0..w {
                            for m in 0..kh {
                                for n in 0..kw {
                                    let v = c_pad[i][(y + m) * pw + x + n];
                                    let cell = y * w + x;
                                    if v > best[cell] {
                                        best[cell] = v;
                                        let yy = (y + m) as isize - (kh / 2) as isize;
                                        let xx = (x + n) as isize - (kw / 2) as isize;
                                        arg[cell] = if yy >= 0
                                            && yy < h as isize
                                            && xx >= 0
                                            && xx < w as isize
                                        {
                                            Some((i, yy as usize, xx as usize))
                                        } else {
                                            None
                                        };
                                    }
                                }
                            }
                        }
                    }
                }
                for o in 0..out_ch {
                    out_c.channel_mut(o).copy_from_slice(&best);
                }
                Some(arg)
            }
        };

        let cache = ForwardCache {
            input: input.clone(),
            applicability,
            kernel_sums,
            numer,
            denom,
            zc_pad,
            c_pad,
            winmax_arg,
        };
        Ok((ConfSignal { z: out_z, c: out_c }, cache))
    }

    /// Backward pass. `grad_out_z` and `grad_out_c` are the loss gradients
    /// with respect to the forward outputs.
    ///
    /// The data quotient `z = N/(D+eps) + b` differentiates as
    /// `dz/dN = 1/(D+eps)` and `dz/dD = -N/(D+eps)^2`; the confidence
    /// `c = (D+eps)/S` adds `dc/dD = 1/S` and, through the kernel-sum
    /// normalizer `S`, `dc/dA = -(D+eps)/S^2` per tap. Input-side gradients
    /// are transposed correlations with the effective filter.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        grad_out_z: &Tensor,
        grad_out_c: &Tensor,
    ) -> Result<LayerBackward> {
        let (h, w) = (cache.input.height(), cache.input.width());
        let (kh, kw) = self.kernel();
        let (in_ch, out_ch) = (self.in_channels(), self.out_channels());
        let out_shape = [out_ch, h, w];
        if grad_out_z.shape() != out_shape || grad_out_c.shape() != out_shape {
            return Err(Error::shape(format!(
                "upstream gradients {:?}/{:?} do not match output {:?}",
                grad_out_z.shape(),
                grad_out_c.shape(),
                out_shape
            )));
        }
        let ktaps = kh * kw;
        let eps = self.epsilon;

        // Gradients with respect to the raw numerator and denominator maps.
        let mut g_numer = Tensor::zeros(&out_shape);
        let mut g_denom = Tensor::zeros(&out_shape);
        let mut grad_b = vec![0.0; out_ch];
        for o in 0..out_ch {
            let gz = grad_out_z.channel(o);
            let gc = grad_out_c.channel(o);
            let nn = cache.numer.channel(o);
            let dd = cache.denom.channel(o);
            let gn = g_numer.channel_mut(o);
            for ((g, &gzv), &d) in gn.iter_mut().zip(gz).zip(dd) {
                *g = gzv / (d + eps);
            }
            let gd = g_denom.channel_mut(o);
            match self.conf_rule {
                ConfRule::Normalized => {
                    let s = cache.kernel_sums[o];
                    for ((g, (&gzv, &gcv)), (&n, &d)) in gd
                        .iter_mut()
                        .zip(gz.iter().zip(gc))
                        .zip(nn.iter().zip(dd))
                    {
                        let q = d + eps;
                        *g = -gzv * n / (q * q) + gcv / s;
                    }
                }
                ConfRule::WindowMax => {
                    for ((g, &gzv), (&n, &d)) in gd.iter_mut().zip(gz).zip(nn.iter().zip(dd)) {
                        let q = d + eps;
                        *g = -gzv * n / (q * q);
                    }
                }
            }
            grad_b[o] = gz.iter().sum();
        }

        // Filter gradients, then the gamma chain-rule factor.
        let mut grad_a = Tensor::zeros(self.weights.shape());
        for o in 0..out_ch {
            for i in 0..in_ch {
                let slot = &mut grad_a.data_mut()[(o * in_ch + i) * ktaps..(o * in_ch + i + 1) * ktaps];
                correlate_kernel_grad(&cache.zc_pad[i], h, w, g_numer.channel(o), kh, kw, slot);
                correlate_kernel_grad(&cache.c_pad[i], h, w, g_denom.channel(o), kh, kw, slot);
            }
        }
        if self.conf_rule == ConfRule::Normalized {
            // Every tap of output channel o shifts the kernel-sum
            // normalizer equally.
            for o in 0..out_ch {
                let s = cache.kernel_sums[o];
                let gc = grad_out_c.channel(o);
                let dd = cache.denom.channel(o);
                let pull: f64 = gc
                    .iter()
                    .zip(dd)
                    .map(|(&g, &d)| g * (d + eps))
                    .sum::<f64>()
                    / (s * s);
                for v in
                    &mut grad_a.data_mut()[o * in_ch * ktaps..(o + 1) * in_ch * ktaps]
                {
                    *v -= pull;
                }
            }
        }
        let mut grad_w = grad_a;
        for (g, &wv) in grad_w.data_mut().iter_mut().zip(self.weights.data()) {
            *g *= self.gamma.derivative(wv);
        }

        // Input gradients: transposed correlations, i.e. same-size
        // correlation with the rotated filter.
        let mut grad_in_z = Tensor::zeros(&[in_ch, h, w]);
        let mut grad_in_c = Tensor::zeros(&[in_ch, h, w]);
        let mut g_zc = vec![0.0; h * w];
        for i in 0..in_ch {
            g_zc.iter_mut().for_each(|v| *v = 0.0);
            let gci = grad_in_c.channel_mut(i);
            for o in 0..out_ch {
                let k = &cache.applicability.data()
                    [(o * in_ch + i) * ktaps..(o * in_ch + i + 1) * ktaps];
                let rot: Vec<f64> = k.iter().rev().cloned().collect();
                let gn_pad = zero_pad_plane(g_numer.channel(o), h, w, kh, kw);
                correlate2d_valid(&gn_pad, h, w, &rot, kh, kw, &mut g_zc, true);
                let gd_pad = zero_pad_plane(g_denom.channel(o), h, w, kh, kw);
                correlate2d_valid(&gd_pad, h, w, &rot, kh, kw, gci, true);
            }
            let z = cache.input.z.channel(i);
            let c = cache.input.c.channel(i);
            let gzi = grad_in_z.channel_mut(i);
            for (((gz, gc), (&zv, &cv)), &gzc) in gzi
                .iter_mut()
                .zip(grad_in_c.channel_mut(i).iter_mut())
                .zip(z.iter().zip(c))
                .zip(&g_zc)
            {
                *gz = gzc * cv;
                *gc += gzc * zv;
            }
        }

        if let Some(arg) = &cache.winmax_arg {
            // Confidence gradients route to the selected window maximum.
            for o in 0..out_ch {
                let gc = grad_out_c.channel(o);
                for (cell, &g) in gc.iter().enumerate() {
                    if let Some((i, y, x)) = arg[cell] {
                        grad_in_c.channel_mut(i)[y * w + x] += g;
                    }
                }
            }
        }

        Ok(LayerBackward {
            grad_in_z,
            grad_in_c,
            grad_w,
            grad_b,
        })
    }

    /// Write the layer as `<stem>.meta` (textual header), `<stem>.w.nct`
    /// and `<stem>.b.nct` in `dir`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        let (kh, kw) = self.kernel();
        let beta = match self.gamma {
            NonNeg::SoftPlus { beta } => beta,
            _ => 0.0,
        };
        let meta = format!(
            "out_channels = {}\nin_channels = {}\nkernel = {}x{}\ngamma = {}\nbeta = {}\nepsilon = {}\nconf_rule = {}\n",
            self.out_channels(),
            self.in_channels(),
            kh,
            kw,
            self.gamma.kind_name(),
            beta,
            self.epsilon,
            self.conf_rule.name(),
        );
        std::fs::write(dir.join(format!("{stem}.meta")), meta)?;
        self.weights.save_nct(&dir.join(format!("{stem}.w.nct")))?;
        Tensor::from_vec(&[self.bias.len()], self.bias.clone())?
            .save_nct(&dir.join(format!("{stem}.b.nct")))?;
        Ok(())
    }

    pub fn load(dir: &Path, stem: &str) -> Result<NConvLayer> {
        let meta_path = dir.join(format!("{stem}.meta"));
        let text = std::fs::read_to_string(&meta_path)?;
        let path = meta_path.display().to_string();
        let mut fields = std::collections::HashMap::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::format(&path, format!("expected 'key = value', got '{line}'")))?;
            fields.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |key: &str| -> Result<&String> {
            fields
                .get(key)
                .ok_or_else(|| Error::format(&path, format!("missing key '{key}'")))
        };
        let beta: f64 = get("beta")?
            .parse()
            .map_err(|_| Error::format(&path, "bad beta"))?;
        let gamma = match get("gamma")?.as_str() {
            "softplus" => NonNeg::SoftPlus { beta },
            other => NonNeg::parse(other, beta)?,
        };
        let epsilon: f64 = get("epsilon")?
            .parse()
            .map_err(|_| Error::format(&path, "bad epsilon"))?;
        let conf_rule = ConfRule::parse(get("conf_rule")?)?;
        let weights = Tensor::load_nct(&dir.join(format!("{stem}.w.nct")))?;
        let bias = Tensor::load_nct(&dir.join(format!("{stem}.b.nct")))?.into_vec();
        let layer = NConvLayer::from_parts(weights, bias, gamma, epsilon, conf_rule)?;
        let (kh, kw) = layer.kernel();
        let expect = format!("{kh}x{kw}");
        if get("kernel")? != &expect {
            return Err(Error::format(
                &path,
                format!("kernel header disagrees with weight tensor ({expect})"),
            ));
        }
        Ok(layer)
    }
}

/// Shift `t` such that `sum(gamma(raw + t)) = 1`, by bisection. The sum is
/// monotone in `t` for every transform here.
fn unit_sum_shift(raw: &[f64], gamma: NonNeg) -> f64 {
    let total = |t: f64| raw.iter().map(|&w| gamma.eval(w + t)).sum::<f64>() - 1.0;
    let (mut lo, mut hi) = (-60.0, 60.0);
    if total(lo) > 0.0 || total(hi) < 0.0 {
        // Degenerate transform (e.g. a single sigmoid tap can never reach
        // sum 1); fall back to no shift.
        return 0.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if total(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}
