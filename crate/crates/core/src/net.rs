//! Unguided hierarchical multi-scale completion network.
//!
//! Each scale runs a stack of normalized-convolution layers. Downsampling
//! max-pools the confidence map and gathers the data values at the pooled
//! indices, so the most confident samples survive; pooled confidences are
//! divided by the Jacobian of the scaling (stride^2) to keep absolute
//! confidence levels comparable across scales. Coarse scales are brought
//! back up by nearest-neighbor upsampling, concatenated with the finer
//! scale and fused by a normalized-convolution layer; a final 1x1 layer
//! merges the channels into the single-channel dense output plus its
//! confidence map.
//!
//! With weight sharing enabled (the default) the channel-preserving part of
//! the stack is reused at every scale, which keeps the parameter count in
//! the few-hundreds.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::layer::{ConfRule, ConfSignal, ForwardCache, NConvLayer, NonNeg};
use crate::tensor::Tensor;

/// Architecture description: scale count, kernel sizes, channel width, and
/// the layer hyper-parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct NetSpec {
    pub scales: usize,
    pub channels: usize,
    /// Kernel extent of the per-scale stack layers.
    pub filter_kernel: usize,
    /// Kernel extent of the scale-fusion layers.
    pub fuse_kernel: usize,
    /// Layers per scale stack, including the single-channel entry layer at
    /// the finest scale. Coarser scales run the channel-preserving tail.
    pub front_layers: usize,
    /// Reuse the tail weights at every scale.
    pub share_weights: bool,
    pub epsilon: f64,
    pub gamma: NonNeg,
}

impl Default for NetSpec {
    fn default() -> Self {
        NetSpec {
            scales: 3,
            channels: 2,
            filter_kernel: 5,
            fuse_kernel: 3,
            front_layers: 2,
            share_weights: true,
            epsilon: 1e-8,
            gamma: NonNeg::SoftPlus { beta: 10.0 },
        }
    }
}

/// Trainable parameters: the ordered layer list the topology indexes into.
#[derive(Debug, Clone)]
pub struct NetState {
    pub layers: Vec<NConvLayer>,
}

/// Gradient of one layer's parameters.
#[derive(Debug, Clone)]
pub struct LayerGrads {
    pub w: Tensor,
    pub b: Vec<f64>,
}

impl LayerGrads {
    pub fn zeros_like(layer: &NConvLayer) -> LayerGrads {
        LayerGrads {
            w: Tensor::zeros(layer.weights.shape()),
            b: vec![0.0; layer.bias.len()],
        }
    }

    pub fn accumulate(&mut self, w: &Tensor, b: &[f64]) {
        self.w.add_assign(w).expect("gradient shape mismatch");
        for (acc, g) in self.b.iter_mut().zip(b) {
            *acc += g;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for v in self.w.data_mut() {
            *v *= s;
        }
        for v in &mut self.b {
            *v *= s;
        }
    }
}

/// Full-network gradients, aligned with `NetState::layers`, plus the
/// gradient on the network input.
pub struct NetGrads {
    pub layers: Vec<LayerGrads>,
    pub input_z: Tensor,
    pub input_c: Tensor,
}

/// For each coarse pixel, the flat spatial index of the selected fine pixel.
#[derive(Debug, Clone)]
pub struct PoolIndexMap {
    pub channels: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub stride: usize,
    /// `channels * out_h * out_w` entries, each a `y * fine_w + x` index.
    pub idx: Vec<usize>,
}

/// Which layers the topology applies where. Indices refer to
/// `NetState::layers`.
#[derive(Debug, Clone)]
struct Topology {
    /// Layer indices run at each scale, finest first (scale 0 starts with
    /// the single-channel entry layer).
    stacks: Vec<Vec<usize>>,
    /// Fusion layer for bringing scale `s+1` into scale `s`.
    fuses: Vec<usize>,
    merge: usize,
}

impl NetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.scales < 1 {
            return Err(Error::arg("scales must be at least 1"));
        }
        if self.channels < 1 {
            return Err(Error::arg("channels must be at least 1"));
        }
        if self.front_layers < 1 {
            return Err(Error::arg("front_layers must be at least 1"));
        }
        if self.filter_kernel % 2 == 0 || self.fuse_kernel % 2 == 0 {
            return Err(Error::arg("kernel extents must be odd"));
        }
        if self.epsilon <= 0.0 {
            return Err(Error::arg("epsilon must be positive"));
        }
        Ok(())
    }

    /// The confidence rule every layer uses: the window-max fallback when
    /// the non-negativity constraint is lifted, the normalized denominator
    /// otherwise.
    pub fn conf_rule(&self) -> ConfRule {
        if self.gamma == NonNeg::Identity {
            ConfRule::WindowMax
        } else {
            ConfRule::Normalized
        }
    }

    fn topology(&self) -> Topology {
        let tail = self.front_layers - 1;
        let mut stacks = vec![Vec::new(); self.scales];
        stacks[0].push(0);
        let mut next = 1;
        if self.share_weights {
            let shared: Vec<usize> = (next..next + tail).collect();
            next += tail;
            stacks[0].extend(&shared);
            for s in 1..self.scales {
                stacks[s].extend(&shared);
            }
        } else {
            for s in 0..self.scales {
                stacks[s].extend(next..next + tail);
                next += tail;
            }
        }
        let fuses: Vec<usize> = (next..next + self.scales.saturating_sub(1)).collect();
        next += self.scales - 1;
        Topology {
            stacks,
            fuses,
            merge: next,
        }
    }

    /// Shape of each layer as `(out_ch, in_ch, k)`, in storage order.
    fn layer_shapes(&self) -> Vec<(usize, usize, usize)> {
        let ch = self.channels;
        let tail = self.front_layers - 1;
        let tail_sets = if self.share_weights { 1 } else { self.scales };
        let mut shapes = vec![(ch, 1, self.filter_kernel)];
        for _ in 0..tail_sets {
            for _ in 0..tail {
                shapes.push((ch, ch, self.filter_kernel));
            }
        }
        for _ in 0..self.scales.saturating_sub(1) {
            shapes.push((ch, 2 * ch, self.fuse_kernel));
        }
        shapes.push((1, ch, 1));
        shapes
    }

    /// Total trainable parameter count of this architecture.
    pub fn param_count(&self) -> usize {
        self.layer_shapes()
            .iter()
            .map(|&(o, i, k)| o * i * k * k + o)
            .sum()
    }

    /// Parse the flat `key = value` config format.
    pub fn parse(text: &str, origin: &str) -> Result<NetSpec> {
        let mut spec = NetSpec::default();
        let mut beta = match spec.gamma {
            NonNeg::SoftPlus { beta } => beta,
            _ => 1.0,
        };
        let mut gamma_kind = spec.gamma.kind_name().to_string();
        let mut seen = HashMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::format(origin, format!("line {}: expected 'key = value'", lineno + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            if seen.insert(key.to_string(), ()).is_some() {
                return Err(Error::format(origin, format!("duplicate key '{key}'")));
            }
            let bad = |what: &str| Error::format(origin, format!("bad {what} '{value}'"));
            match key {
                "scales" => spec.scales = value.parse().map_err(|_| bad("scales"))?,
                "channels" => spec.channels = value.parse().map_err(|_| bad("channels"))?,
                "filter_kernel" => {
                    spec.filter_kernel = value.parse().map_err(|_| bad("filter_kernel"))?
                }
                "fuse_kernel" => spec.fuse_kernel = value.parse().map_err(|_| bad("fuse_kernel"))?,
                "front_layers" => {
                    spec.front_layers = value.parse().map_err(|_| bad("front_layers"))?
                }
                "share_weights" => {
                    spec.share_weights = value.parse().map_err(|_| bad("share_weights"))?
                }
                "epsilon" => spec.epsilon = value.parse().map_err(|_| bad("epsilon"))?,
                "beta" => beta = value.parse().map_err(|_| bad("beta"))?,
                "gamma_kind" => gamma_kind = value.to_string(),
                other => {
                    return Err(Error::format(origin, format!("unknown key '{other}'")));
                }
            }
        }
        spec.gamma = NonNeg::parse(&gamma_kind, beta)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<NetSpec> {
        let text = std::fs::read_to_string(path)?;
        NetSpec::parse(&text, &path.display().to_string())
    }
}

impl fmt::Display for NetSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let beta = match self.gamma {
            NonNeg::SoftPlus { beta } => beta,
            _ => 0.0,
        };
        writeln!(f, "scales = {}", self.scales)?;
        writeln!(f, "channels = {}", self.channels)?;
        writeln!(f, "filter_kernel = {}", self.filter_kernel)?;
        writeln!(f, "fuse_kernel = {}", self.fuse_kernel)?;
        writeln!(f, "front_layers = {}", self.front_layers)?;
        writeln!(f, "share_weights = {}", self.share_weights)?;
        writeln!(f, "epsilon = {}", self.epsilon)?;
        writeln!(f, "gamma_kind = {}", self.gamma.kind_name())?;
        writeln!(f, "beta = {}", beta)
    }
}

/// Initialize trainable parameters for a spec.
pub fn init_state<R: Rng>(spec: &NetSpec, rng: &mut R) -> Result<NetState> {
    spec.validate()?;
    let rule = spec.conf_rule();
    let layers = spec
        .layer_shapes()
        .into_iter()
        .map(|(o, i, k)| NConvLayer::init(o, i, k, k, spec.gamma, spec.epsilon, rule, rng))
        .collect::<Result<Vec<_>>>()?;
    Ok(NetState { layers })
}

impl NetState {
    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.param_count()).sum()
    }

    /// Check that the layer list matches what `spec` expects.
    pub fn check_against(&self, spec: &NetSpec) -> Result<()> {
        let shapes = spec.layer_shapes();
        if shapes.len() != self.layers.len() {
            return Err(Error::shape(format!(
                "spec expects {} layers, state has {}",
                shapes.len(),
                self.layers.len()
            )));
        }
        for (i, (layer, &(o, ic, k))) in self.layers.iter().zip(&shapes).enumerate() {
            let (kh, kw) = layer.kernel();
            if layer.out_channels() != o || layer.in_channels() != ic || kh != k || kw != k {
                return Err(Error::shape(format!(
                    "layer {i} is {}x{}x{kh}x{kw}, spec expects {o}x{ic}x{k}x{k}",
                    layer.out_channels(),
                    layer.in_channels()
                )));
            }
        }
        Ok(())
    }
}

/// Confidence-driven max-pool downsampling. The confidence map decides; the
/// data map is gathered at the winning indices. Ties go to the first
/// occurrence in row-major block order.
pub fn conf_maxpool_down(input: &ConfSignal, stride: usize) -> Result<(ConfSignal, PoolIndexMap)> {
    if stride < 1 {
        return Err(Error::arg("pool stride must be at least 1"));
    }
    let (ch, h, w) = (input.channels(), input.height(), input.width());
    if h % stride != 0 || w % stride != 0 {
        return Err(Error::shape(format!(
            "spatial dims {h}x{w} not divisible by stride {stride}"
        )));
    }
    let (oh, ow) = (h / stride, w / stride);
    let mut out_z = Tensor::zeros(&[ch, oh, ow]);
    let mut out_c = Tensor::zeros(&[ch, oh, ow]);
    let mut idx = vec![0usize; ch * oh * ow];
    for cch in 0..ch {
        let zc = input.z.channel(cch);
        let cc = input.c.channel(cch);
        for y in 0..oh {
            for x in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut arg = 0usize;
                for dy in 0..stride {
                    for dx in 0..stride {
                        let fi = (y * stride + dy) * w + x * stride + dx;
                        if cc[fi] > best {
                            best = cc[fi];
                            arg = fi;
                        }
                    }
                }
                out_c.channel_mut(cch)[y * ow + x] = best;
                out_z.channel_mut(cch)[y * ow + x] = zc[arg];
                idx[(cch * oh + y) * ow + x] = arg;
            }
        }
    }
    Ok((
        ConfSignal { z: out_z, c: out_c },
        PoolIndexMap {
            channels: ch,
            out_h: oh,
            out_w: ow,
            stride,
            idx,
        },
    ))
}

/// Divide confidences by the Jacobian determinant of the 2-D scaling,
/// `stride^2`, so absolute confidence levels survive downsampling.
pub fn jacobian_rescale(confidence: &Tensor, stride: usize) -> Tensor {
    let area = (stride * stride) as f64;
    confidence.map(|c| c / area)
}

/// Nearest-neighbor upsampling by an integer factor (value replication).
pub fn upsample_nearest(input: &ConfSignal, factor: usize) -> ConfSignal {
    let (ch, h, w) = (input.channels(), input.height(), input.width());
    let (oh, ow) = (h * factor, w * factor);
    let mut z = Tensor::zeros(&[ch, oh, ow]);
    let mut c = Tensor::zeros(&[ch, oh, ow]);
    for cch in 0..ch {
        let (zi, ci) = (input.z.channel(cch), input.c.channel(cch));
        let zo = z.channel_mut(cch);
        for y in 0..oh {
            for x in 0..ow {
                zo[y * ow + x] = zi[(y / factor) * w + x / factor];
            }
        }
        let co = c.channel_mut(cch);
        for y in 0..oh {
            for x in 0..ow {
                co[y * ow + x] = ci[(y / factor) * w + x / factor];
            }
        }
    }
    ConfSignal { z, c }
}

/// Channel-concatenate two signals of equal spatial size, `a` first.
pub fn concat_channels(a: &ConfSignal, b: &ConfSignal) -> Result<ConfSignal> {
    if a.height() != b.height() || a.width() != b.width() {
        return Err(Error::shape(format!(
            "concat spatial dims disagree: {}x{} vs {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    let (h, w) = (a.height(), a.width());
    let ch = a.channels() + b.channels();
    let mut z = Vec::with_capacity(ch * h * w);
    z.extend_from_slice(a.z.data());
    z.extend_from_slice(b.z.data());
    let mut c = Vec::with_capacity(ch * h * w);
    c.extend_from_slice(a.c.data());
    c.extend_from_slice(b.c.data());
    Ok(ConfSignal {
        z: Tensor::from_vec(&[ch, h, w], z)?,
        c: Tensor::from_vec(&[ch, h, w], c)?,
    })
}

/// Bring a coarse scale up to a fine one: nearest-neighbor upsample the
/// coarse signal, concatenate `[fine, upsampled]`, and fuse with a
/// normalized-convolution layer. Confidence does the arbitration: channels
/// with no confidence contribute nothing to the fused output.
pub fn upsample_concat_fuse(
    coarse: &ConfSignal,
    fine: &ConfSignal,
    fuse_layer: &NConvLayer,
) -> Result<ConfSignal> {
    if coarse.height() * 2 != fine.height() || coarse.width() * 2 != fine.width() {
        return Err(Error::shape(format!(
            "coarse {}x{} must be exactly half of fine {}x{}",
            coarse.height(),
            coarse.width(),
            fine.height(),
            fine.width()
        )));
    }
    let up = upsample_nearest(coarse, 2);
    let cat = concat_channels(fine, &up)?;
    let (out, _) = fuse_layer.forward(&cat)?;
    Ok(out)
}

/// Everything recorded by [`forward_traced`] that [`backward`] replays.
pub struct NetTrace {
    stack_caches: Vec<Vec<(usize, ForwardCache)>>,
    pools: Vec<PoolIndexMap>,
    /// Fine spatial dims per pooled scale, for gradient scattering.
    pool_fine_dims: Vec<(usize, usize)>,
    /// In application order: coarsest fusion first.
    fuse_caches: Vec<(usize, usize, ForwardCache)>,
    merge_cache: (usize, ForwardCache),
}

fn check_input(spec: &NetSpec, input: &ConfSignal) -> Result<()> {
    if input.channels() != 1 {
        return Err(Error::shape(format!(
            "network input is single-channel, got {} channels",
            input.channels()
        )));
    }
    let div = 1usize << (spec.scales - 1);
    if input.height() % div != 0 || input.width() % div != 0 {
        return Err(Error::shape(format!(
            "input {}x{} not divisible by 2^(scales-1) = {div}",
            input.height(),
            input.width()
        )));
    }
    Ok(())
}

/// Run the network and keep the per-layer caches for a backward pass.
pub fn forward_traced(
    spec: &NetSpec,
    state: &NetState,
    input: &ConfSignal,
) -> Result<(ConfSignal, NetTrace)> {
    check_input(spec, input)?;
    state.check_against(spec)?;
    let topo = spec.topology();

    let mut stack_caches = Vec::with_capacity(spec.scales);
    let mut stack_out: Vec<ConfSignal> = Vec::with_capacity(spec.scales);
    let mut pools = Vec::new();
    let mut pool_fine_dims = Vec::new();
    for s in 0..spec.scales {
        let mut cur = if s == 0 {
            input.clone()
        } else {
            let fine = &stack_out[s - 1];
            pool_fine_dims.push((fine.height(), fine.width()));
            let (mut pooled, idx) = conf_maxpool_down(fine, 2)?;
            pooled.c = jacobian_rescale(&pooled.c, 2);
            pools.push(idx);
            pooled
        };
        let mut caches = Vec::new();
        for &li in &topo.stacks[s] {
            let (out, cache) = state.layers[li].forward(&cur)?;
            caches.push((li, cache));
            cur = out;
        }
        stack_caches.push(caches);
        stack_out.push(cur);
    }

    let mut cur = stack_out[spec.scales - 1].clone();
    let mut fuse_caches = Vec::new();
    for s in (0..spec.scales - 1).rev() {
        let up = upsample_nearest(&cur, 2);
        let cat = concat_channels(&stack_out[s], &up)?;
        let li = topo.fuses[s];
        let (out, cache) = state.layers[li].forward(&cat)?;
        fuse_caches.push((s, li, cache));
        cur = out;
    }

    let (merged, merge_cache) = state.layers[topo.merge].forward(&cur)?;
    Ok((
        merged,
        NetTrace {
            stack_caches,
            pools,
            pool_fine_dims,
            fuse_caches,
            merge_cache: (topo.merge, merge_cache),
        },
    ))
}

/// Dense completion: single-channel sparse data plus confidence in,
/// single-channel dense prediction plus confidence out, same spatial size.
pub fn forward(spec: &NetSpec, state: &NetState, input: &ConfSignal) -> Result<ConfSignal> {
    forward_traced(spec, state, input).map(|(out, _)| out)
}

/// Backward pass over a recorded trace. Gradients of shared layers
/// accumulate across every application.
pub fn backward(
    spec: &NetSpec,
    state: &NetState,
    trace: &NetTrace,
    grad_out_z: &Tensor,
    grad_out_c: &Tensor,
) -> Result<NetGrads> {
    let mut grads: Vec<LayerGrads> = state.layers.iter().map(LayerGrads::zeros_like).collect();

    let (merge_idx, merge_cache) = (&trace.merge_cache.0, &trace.merge_cache.1);
    let back = state.layers[*merge_idx].backward(merge_cache, grad_out_z, grad_out_c)?;
    grads[*merge_idx].accumulate(&back.grad_w, &back.grad_b);
    let (mut gz, mut gc) = (back.grad_in_z, back.grad_in_c);

    // Gradient arriving at each scale's stack output.
    let mut stack_grads: Vec<Option<(Tensor, Tensor)>> = vec![None; spec.scales];
    let ch = spec.channels;
    for (s, li, cache) in trace.fuse_caches.iter().rev() {
        let back = state.layers[*li].backward(cache, &gz, &gc)?;
        grads[*li].accumulate(&back.grad_w, &back.grad_b);
        let (fine_z, coarse_z) = split_channels(&back.grad_in_z, ch);
        let (fine_c, coarse_c) = split_channels(&back.grad_in_c, ch);
        add_grad(&mut stack_grads[*s], fine_z, fine_c);
        gz = downsample_sum(&coarse_z, 2);
        gc = downsample_sum(&coarse_c, 2);
    }
    add_grad(&mut stack_grads[spec.scales - 1], gz, gc);

    let mut input_grad = None;
    for s in (0..spec.scales).rev() {
        let (mut gz, mut gc) = stack_grads[s]
            .take()
            .expect("every scale receives a gradient");
        for (li, cache) in trace.stack_caches[s].iter().rev() {
            let back = state.layers[*li].backward(cache, &gz, &gc)?;
            grads[*li].accumulate(&back.grad_w, &back.grad_b);
            gz = back.grad_in_z;
            gc = back.grad_in_c;
        }
        if s == 0 {
            input_grad = Some((gz, gc));
        } else {
            // Undo the Jacobian rescale, then scatter through the pooled
            // indices; only the selected fine pixels receive gradient.
            let gc = gc.scale(1.0 / 4.0);
            let pool = &trace.pools[s - 1];
            let (fh, fw) = trace.pool_fine_dims[s - 1];
            let mut fine_gz = Tensor::zeros(&[pool.channels, fh, fw]);
            let mut fine_gc = Tensor::zeros(&[pool.channels, fh, fw]);
            for cch in 0..pool.channels {
                let plane = pool.out_h * pool.out_w;
                let gzc = gz.channel(cch);
                let gcc = gc.channel(cch);
                let fz = fine_gz.channel_mut(cch);
                for cell in 0..plane {
                    fz[pool.idx[cch * plane + cell]] += gzc[cell];
                }
                let fc = fine_gc.channel_mut(cch);
                for cell in 0..plane {
                    fc[pool.idx[cch * plane + cell]] += gcc[cell];
                }
            }
            add_grad(&mut stack_grads[s - 1], fine_gz, fine_gc);
        }
    }

    let (input_z, input_c) = input_grad.expect("scale 0 produces the input gradient");
    Ok(NetGrads {
        layers: grads,
        input_z,
        input_c,
    })
}

fn split_channels(t: &Tensor, first: usize) -> (Tensor, Tensor) {
    let (ch, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    debug_assert!(first <= ch);
    let plane = h * w;
    let a = Tensor::from_vec(&[first, h, w], t.data()[..first * plane].to_vec()).unwrap();
    let b = Tensor::from_vec(&[ch - first, h, w], t.data()[first * plane..].to_vec()).unwrap();
    (a, b)
}

fn add_grad(slot: &mut Option<(Tensor, Tensor)>, gz: Tensor, gc: Tensor) {
    match slot {
        Some((az, ac)) => {
            az.add_assign(&gz).expect("gradient shape mismatch");
            ac.add_assign(&gc).expect("gradient shape mismatch");
        }
        None => *slot = Some((gz, gc)),
    }
}

/// Adjoint of nearest-neighbor upsampling: sum each replicated block.
fn downsample_sum(t: &Tensor, factor: usize) -> Tensor {
    let (ch, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    let (oh, ow) = (h / factor, w / factor);
    let mut out = Tensor::zeros(&[ch, oh, ow]);
    for cch in 0..ch {
        let src = t.channel(cch);
        let dst = out.channel_mut(cch);
        for y in 0..h {
            for x in 0..w {
                dst[(y / factor) * ow + x / factor] += src[y * w + x];
            }
        }
    }
    out
}

const SPEC_FILE: &str = "net.cfg";

/// Write a checkpoint: the spec file plus one tensor pair per layer.
pub fn save_state(spec: &NetSpec, state: &NetState, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(SPEC_FILE), spec.to_string())?;
    for (i, layer) in state.layers.iter().enumerate() {
        layer.save(dir, &format!("layer_{i:02}"))?;
    }
    Ok(())
}

/// Load a checkpoint and validate it against its own spec.
pub fn load_state(dir: &Path) -> Result<(NetSpec, NetState)> {
    let spec = NetSpec::load(&dir.join(SPEC_FILE))?;
    let count = spec.layer_shapes().len();
    let mut layers = Vec::with_capacity(count);
    for i in 0..count {
        layers.push(NConvLayer::load(dir, &format!("layer_{i:02}"))?);
    }
    let state = NetState { layers };
    state.check_against(&spec)?;
    Ok((spec, state))
}
