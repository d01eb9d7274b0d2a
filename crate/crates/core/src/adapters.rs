//! LoRA adapters, update clipping and low-bit payload quantization.
//!
//! A client trains only the factor pair `(A, B)` of each adapted weight
//! matrix; the base weights stay frozen. What leaves the client is the change
//! of the factors over the round, jointly clipped to a fixed L2 norm and
//! quantized per tensor with a symmetric absmax scale.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::dataset::LabeledDataset;
use crate::error::{FedError, Result};
use crate::federation::{weighted_mean, Weighted};
use crate::model::{for_each_batch, loss_and_grad, ModelSpec, ParamVector, TrainConfig};
use crate::scalar::Scalar;

pub const DEFAULT_RANK: usize = 16;
pub const DEFAULT_ALPHA: f64 = 32.0;
pub const DEFAULT_INIT_STD: f64 = 0.02;
/// Two per-tensor scales of 8 bytes each.
pub const SCALE_OVERHEAD_BYTES: u64 = 16;

/// Low-rank update `(alpha / r) * B A` for a `d_out x d_in` base matrix.
/// `A` is `r x d_in`, `B` is `d_out x r`, both row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter<T> {
    target: String,
    d_in: usize,
    d_out: usize,
    rank: usize,
    alpha: f64,
    a: Vec<T>,
    b: Vec<T>,
}

impl<T: Scalar> LoraAdapter<T> {
    pub fn new(
        target: impl Into<String>,
        d_in: usize,
        d_out: usize,
        rank: usize,
        alpha: f64,
        a: Vec<T>,
        b: Vec<T>,
    ) -> Result<Self> {
        if rank == 0 {
            return Err(FedError::config("adapter rank must be >= 1"));
        }
        if d_in == 0 || d_out == 0 {
            return Err(FedError::shape("adapter dimensions must be >= 1"));
        }
        if !alpha.is_finite() {
            return Err(FedError::config("adapter alpha must be finite"));
        }
        if a.len() != rank * d_in || b.len() != d_out * rank {
            return Err(FedError::shape(format!(
                "A must be {rank}x{d_in} and B {d_out}x{rank}, got {} and {} values",
                a.len(),
                b.len()
            )));
        }
        Ok(Self {
            target: target.into(),
            d_in,
            d_out,
            rank,
            alpha,
            a,
            b,
        })
    }

    /// `A ~ N(0, init_std^2)`, `B = 0`: the adapter starts as the identity.
    pub fn init<R: Rng + ?Sized>(
        target: impl Into<String>,
        d_in: usize,
        d_out: usize,
        rank: usize,
        alpha: f64,
        init_std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let a = (0..rank * d_in)
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                T::of(z * init_std)
            })
            .collect();
        Self::new(
            target,
            d_in,
            d_out,
            rank,
            alpha,
            a,
            vec![T::zero(); d_out * rank],
        )
    }

    /// Adapter for the 2-D segment `target` of `params`.
    pub fn init_for<R: Rng + ?Sized>(
        params: &ParamVector<T>,
        target: &str,
        rank: usize,
        alpha: f64,
        init_std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let (d_out, d_in) = target_dims(params, target)?;
        Self::init(target, d_in, d_out, rank, alpha, init_std, rng)
    }

    pub fn target(&self) -> &str {
        &self.target
    }
    pub fn d_in(&self) -> usize {
        self.d_in
    }
    pub fn d_out(&self) -> usize {
        self.d_out
    }
    pub fn rank(&self) -> usize {
        self.rank
    }
    pub fn alpha(&self) -> f64 {
        self.alpha
    }
    pub fn a(&self) -> &[T] {
        &self.a
    }
    pub fn b(&self) -> &[T] {
        &self.b
    }

    pub fn scaling(&self) -> T {
        T::of(self.alpha / self.rank as f64)
    }

    /// `(alpha / r) * B A`, `d_out x d_in` row-major.
    pub fn delta_weight(&self) -> Vec<T> {
        let s = self.scaling();
        let mut out = vec![T::zero(); self.d_out * self.d_in];
        for i in 0..self.d_out {
            for k in 0..self.rank {
                let bik = self.b[i * self.rank + k];
                if bik == T::zero() {
                    continue;
                }
                let row_a = &self.a[k * self.d_in..(k + 1) * self.d_in];
                for (o, &akj) in out[i * self.d_in..(i + 1) * self.d_in]
                    .iter_mut()
                    .zip(row_a)
                {
                    *o += bik * akj;
                }
            }
        }
        out.iter_mut().for_each(|v| *v *= s);
        out
    }

    fn same_shape(&self, other: &Self) -> bool {
        self.target == other.target
            && self.d_in == other.d_in
            && self.d_out == other.d_out
            && self.rank == other.rank
            && self.alpha == other.alpha
    }
}

fn target_dims<T: Scalar>(params: &ParamVector<T>, target: &str) -> Result<(usize, usize)> {
    let seg = params
        .segment(target)
        .ok_or_else(|| FedError::config(format!("adapter target `{target}` is not a segment")))?;
    match seg.shape[..] {
        [d_out, d_in] => Ok((d_out, d_in)),
        _ => Err(FedError::shape(format!(
            "adapter target `{target}` must be a matrix, has shape {:?}",
            seg.shape
        ))),
    }
}

/// `W + (alpha / r) * B A`; `w` is `d_out x d_in` row-major. Skips the
/// product entirely when `B` is zero so the result is `W` bit for bit.
pub fn lora_apply<T: Scalar>(w: &[T], adapter: &LoraAdapter<T>) -> Result<Vec<T>> {
    if w.len() != adapter.d_out * adapter.d_in {
        return Err(FedError::shape(format!(
            "base matrix has {} values, adapter expects {}x{}",
            w.len(),
            adapter.d_out,
            adapter.d_in
        )));
    }
    if adapter.b.iter().all(|v| *v == T::zero()) {
        return Ok(w.to_vec());
    }
    Ok(w.iter()
        .zip(adapter.delta_weight())
        .map(|(&wv, dv)| wv + dv)
        .collect())
}

/// Base parameters with every adapter merged into its target segment.
pub fn merge_adapters<T: Scalar>(
    base: &ParamVector<T>,
    adapters: &[LoraAdapter<T>],
) -> Result<ParamVector<T>> {
    let mut merged = base.clone();
    for ad in adapters {
        let (d_out, d_in) = target_dims(base, &ad.target)?;
        if (d_out, d_in) != (ad.d_out, ad.d_in) {
            return Err(FedError::shape(format!(
                "adapter for `{}` has wrong dims",
                ad.target
            )));
        }
        let w = base.segment_values(&ad.target).expect("checked above");
        let eff = lora_apply(w, ad)?;
        merged
            .segment_values_mut(&ad.target)
            .expect("checked above")
            .copy_from_slice(&eff);
    }
    Ok(merged)
}

/// Factor deltas `local - global` as one vector with segments
/// `<target>.lora_a` and `<target>.lora_b`.
pub fn adapter_delta<T: Scalar>(
    local: &[LoraAdapter<T>],
    global: &[LoraAdapter<T>],
) -> Result<ParamVector<T>> {
    if local.len() != global.len() || local.iter().zip(global).any(|(l, g)| !l.same_shape(g)) {
        return Err(FedError::shape("local and global adapters differ in shape"));
    }
    let mut layout = Vec::new();
    let mut values = Vec::new();
    for (l, g) in local.iter().zip(global) {
        layout.push((format!("{}.lora_a", l.target), vec![l.rank, l.d_in]));
        layout.push((format!("{}.lora_b", l.target), vec![l.d_out, l.rank]));
        values.extend(l.a.iter().zip(&g.a).map(|(&x, &y)| x - y));
        values.extend(l.b.iter().zip(&g.b).map(|(&x, &y)| x - y));
    }
    ParamVector::from_values(&layout, values)
}

/// `global + delta`, the inverse of [`adapter_delta`].
pub fn apply_delta<T: Scalar>(
    global: &[LoraAdapter<T>],
    delta: &ParamVector<T>,
) -> Result<Vec<LoraAdapter<T>>> {
    global
        .iter()
        .map(|g| {
            let da = delta
                .segment_values(&format!("{}.lora_a", g.target))
                .ok_or_else(|| FedError::shape("delta lacks an A segment"))?;
            let db = delta
                .segment_values(&format!("{}.lora_b", g.target))
                .ok_or_else(|| FedError::shape("delta lacks a B segment"))?;
            if da.len() != g.a.len() || db.len() != g.b.len() {
                return Err(FedError::shape("delta segment size mismatch"));
            }
            let mut out = g.clone();
            out.a.iter_mut().zip(da).for_each(|(x, &d)| *x += d);
            out.b.iter_mut().zip(db).for_each(|(x, &d)| *x += d);
            Ok(out)
        })
        .collect()
}

/// Scales `delta` by `min(1, clip_norm / ||delta||)`.
pub fn clip_update<T: Scalar>(delta: &ParamVector<T>, clip_norm: f64) -> Result<ParamVector<T>> {
    if !(clip_norm > 0.0 && clip_norm.is_finite()) {
        return Err(FedError::config(format!(
            "clip_norm must be > 0, got {clip_norm}"
        )));
    }
    let norm = delta.l2_norm();
    let bound = T::of(clip_norm);
    let mut out = delta.clone();
    if norm > bound {
        out.scale(bound / norm);
    }
    Ok(out)
}

/// Adds `N(0, std^2)` noise to every coordinate.
pub fn add_gaussian_noise<T: Scalar, R: Rng + ?Sized>(
    delta: &mut ParamVector<T>,
    std: f64,
    rng: &mut R,
) {
    if std == 0.0 {
        return;
    }
    for v in delta.values_mut() {
        let z: f64 = rng.sample(StandardNormal);
        *v += T::of(z * std);
    }
}

/// Symmetric absmax quantized tensor: `value = code * scale`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor<T> {
    pub codes: Vec<i32>,
    pub bits: u32,
    pub scale: T,
    pub shape: Vec<usize>,
}

impl<T: Scalar> QuantizedTensor<T> {
    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }
}

pub fn check_bits(bits: u32) -> Result<()> {
    match bits {
        4 | 8 | 16 | 32 => Ok(()),
        _ => Err(FedError::config(format!(
            "unsupported bit width {bits}; use 4, 8, 16 or 32"
        ))),
    }
}

/// Largest code magnitude for a signed symmetric `bits`-wide grid.
pub fn max_code(bits: u32) -> i64 {
    (1i64 << (bits - 1)) - 1
}

/// Per-tensor symmetric quantization: `scale = absmax / qmax`, codes rounded
/// half away from zero and clamped to `[-qmax, qmax]`.
pub fn quantize<T: Scalar>(
    values: &[T],
    shape: Vec<usize>,
    bits: u32,
) -> Result<QuantizedTensor<T>> {
    check_bits(bits)?;
    if shape.iter().product::<usize>() != values.len() {
        return Err(FedError::shape(
            "quantize: shape does not match value count",
        ));
    }
    if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
        return Err(FedError::Numeric(format!(
            "cannot quantize non-finite value {bad}"
        )));
    }
    let qmax = max_code(bits);
    let absmax = values.iter().fold(T::zero(), |m, v| m.max(v.abs()));
    let scale = absmax / T::of(qmax as f64);
    let codes = if scale == T::zero() {
        vec![0; values.len()]
    } else {
        let q = T::of(qmax as f64);
        values
            .iter()
            .map(|&v| (v / scale).round().max(-q).min(q).as_f64() as i32)
            .collect()
    };
    Ok(QuantizedTensor {
        codes,
        bits,
        scale,
        shape,
    })
}

pub fn dequantize<T: Scalar>(q: &QuantizedTensor<T>) -> Vec<T> {
    q.codes.iter().map(|&c| T::of(c as f64) * q.scale).collect()
}

/// 4-bit quantization of a flat tensor: codes in `[-7, 7]`, `scale = absmax / 7`.
pub fn quantize4<T: Scalar>(values: &[T]) -> Result<QuantizedTensor<T>> {
    quantize(values, vec![values.len()], 4)
}

pub fn dequantize4<T: Scalar>(q: &QuantizedTensor<T>) -> Vec<T> {
    dequantize(q)
}

/// Two signed 4-bit codes per byte, low nibble first.
pub fn pack4(codes: &[i32]) -> Vec<u8> {
    codes
        .chunks(2)
        .map(|pair| {
            let lo = (pair[0] as u8) & 0x0F;
            let hi = pair.get(1).map_or(0, |&c| (c as u8) & 0x0F);
            lo | (hi << 4)
        })
        .collect()
}

pub fn unpack4(bytes: &[u8], n: usize) -> Vec<i32> {
    let sign_extend = |nib: u8| -> i32 { ((nib << 4) as i8 >> 4) as i32 };
    bytes
        .iter()
        .flat_map(|&b| [sign_extend(b & 0x0F), sign_extend(b >> 4)])
        .take(n)
        .collect()
}

/// Communicated bytes for one adapter at `bits` per factor entry:
/// `ceil(r * (d_in + d_out) * bits / 8)` plus the two scales.
pub fn payload_bytes(rank: usize, d_in: usize, d_out: usize, bits: u32) -> Result<u64> {
    check_bits(bits)?;
    if rank == 0 {
        return Err(FedError::config("adapter rank must be >= 1"));
    }
    let bits_total = (rank * (d_in + d_out)) as u64 * bits as u64;
    Ok(bits_total.div_ceil(8) + SCALE_OVERHEAD_BYTES)
}

pub fn adapter_payload_bytes<T: Scalar>(adapter: &LoraAdapter<T>, bits: u32) -> Result<u64> {
    payload_bytes(adapter.rank, adapter.d_in, adapter.d_out, bits)
}

/// One adapter's quantized factor deltas as sent over the wire.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterPayload<T> {
    pub target: String,
    pub rank: usize,
    pub d_in: usize,
    pub d_out: usize,
    pub alpha: f64,
    pub a: QuantizedTensor<T>,
    pub b: QuantizedTensor<T>,
}

impl<T: Scalar> AdapterPayload<T> {
    pub fn dequantized_norm(&self) -> T {
        dequantize(&self.a)
            .into_iter()
            .chain(dequantize(&self.b))
            .map(|v| v * v)
            .sum::<T>()
            .sqrt()
    }

    /// Accounted size, see [`payload_bytes`].
    pub fn accounted_bytes(&self) -> u64 {
        payload_bytes(self.rank, self.d_in, self.d_out, self.a.bits).expect("validated at build")
    }

    /// 4-bit wire encoding, little endian:
    /// `u32 name_len, name, u32 r, u32 d_in, u32 d_out, f64 alpha,
    /// f64 scale_a, f64 scale_b`, then packed codes of A then B (row-major).
    pub fn encode(&self) -> Result<Vec<u8>> {
        if self.a.bits != 4 || self.b.bits != 4 {
            return Err(FedError::Wire(
                "only 4-bit payloads have a wire encoding".into(),
            ));
        }
        let name = self.target.as_bytes();
        let mut out = Vec::new();
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name);
        for v in [self.rank, self.d_in, self.d_out] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.extend_from_slice(&self.alpha.to_le_bytes());
        out.extend_from_slice(&self.a.scale.as_f64().to_le_bytes());
        out.extend_from_slice(&self.b.scale.as_f64().to_le_bytes());
        let codes: Vec<i32> = self.a.codes.iter().chain(&self.b.codes).copied().collect();
        out.extend(pack4(&codes));
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        let name_len = cur.u32()? as usize;
        let target = String::from_utf8(cur.take(name_len)?.to_vec())
            .map_err(|e| FedError::Wire(e.to_string()))?;
        let rank = cur.u32()? as usize;
        let d_in = cur.u32()? as usize;
        let d_out = cur.u32()? as usize;
        let alpha = cur.f64()?;
        let scale_a = T::of(cur.f64()?);
        let scale_b = T::of(cur.f64()?);
        let n_a = rank * d_in;
        let n_b = d_out * rank;
        let packed = cur.take((n_a + n_b).div_ceil(2))?;
        if cur.pos != bytes.len() {
            return Err(FedError::Wire("trailing bytes after payload".into()));
        }
        let codes = unpack4(packed, n_a + n_b);
        if codes.iter().any(|c| c.abs() > 7) {
            return Err(FedError::Wire("4-bit code -8 is outside [-7, 7]".into()));
        }
        Ok(Self {
            target,
            rank,
            d_in,
            d_out,
            alpha,
            a: QuantizedTensor {
                codes: codes[..n_a].to_vec(),
                bits: 4,
                scale: scale_a,
                shape: vec![rank, d_in],
            },
            b: QuantizedTensor {
                codes: codes[n_a..].to_vec(),
                bits: 4,
                scale: scale_b,
                shape: vec![d_out, rank],
            },
        })
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| FedError::Wire("payload truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}

/// Client-side communication settings for adapter deltas.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PayloadConfig {
    pub bits: u32,
    pub clip_norm: f64,
    /// Gaussian noise std as a multiple of `clip_norm`.
    pub noise_multiplier: f64,
}

impl Default for PayloadConfig {
    fn default() -> Self {
        Self {
            bits: 4,
            clip_norm: 1.0,
            noise_multiplier: 0.0,
        }
    }
}

/// Clips the joint factor delta, optionally adds noise, and quantizes each
/// factor. Without noise the dequantized payload is kept inside the clipping
/// ball by shrinking the scales when rounding pushed it outside.
pub fn build_payloads<T: Scalar, R: Rng + ?Sized>(
    local: &[LoraAdapter<T>],
    global: &[LoraAdapter<T>],
    cfg: &PayloadConfig,
    rng: &mut R,
) -> Result<Vec<AdapterPayload<T>>> {
    check_bits(cfg.bits)?;
    let delta = adapter_delta(local, global)?;
    let mut clipped = clip_update(&delta, cfg.clip_norm)?;
    add_gaussian_noise(&mut clipped, cfg.noise_multiplier * cfg.clip_norm, rng);
    let mut payloads = global
        .iter()
        .map(|g| {
            let a_name = format!("{}.lora_a", g.target);
            let b_name = format!("{}.lora_b", g.target);
            Ok(AdapterPayload {
                target: g.target.clone(),
                rank: g.rank,
                d_in: g.d_in,
                d_out: g.d_out,
                alpha: g.alpha,
                a: quantize(
                    clipped.segment_values(&a_name).expect("delta layout"),
                    vec![g.rank, g.d_in],
                    cfg.bits,
                )?,
                b: quantize(
                    clipped.segment_values(&b_name).expect("delta layout"),
                    vec![g.d_out, g.rank],
                    cfg.bits,
                )?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    if cfg.noise_multiplier == 0.0 {
        let bound = T::of(cfg.clip_norm);
        let norm = payload_norm(&payloads);
        if norm > bound {
            let shrink = bound / norm;
            for p in &mut payloads {
                p.a.scale *= shrink;
                p.b.scale *= shrink;
            }
        }
    }
    Ok(payloads)
}

/// Joint L2 norm of the dequantized payloads.
pub fn payload_norm<T: Scalar>(payloads: &[AdapterPayload<T>]) -> T {
    payloads
        .iter()
        .map(|p| {
            let n = p.dequantized_norm();
            n * n
        })
        .sum::<T>()
        .sqrt()
}

/// Server-side reconstruction: `global + dequantized delta` per adapter.
pub fn apply_payloads<T: Scalar>(
    global: &[LoraAdapter<T>],
    payloads: &[AdapterPayload<T>],
) -> Result<Vec<LoraAdapter<T>>> {
    if global.len() != payloads.len() {
        return Err(FedError::shape(
            "payload count does not match adapter count",
        ));
    }
    global
        .iter()
        .zip(payloads)
        .map(|(g, p)| {
            if p.target != g.target || p.rank != g.rank || p.d_in != g.d_in || p.d_out != g.d_out {
                return Err(FedError::shape(format!(
                    "payload for `{}` does not match",
                    p.target
                )));
            }
            let mut out = g.clone();
            out.a
                .iter_mut()
                .zip(dequantize(&p.a))
                .for_each(|(x, d)| *x += d);
            out.b
                .iter_mut()
                .zip(dequantize(&p.b))
                .for_each(|(x, d)| *x += d);
            Ok(out)
        })
        .collect()
}

/// FedAvg over adapters: `A` and `B` are averaged independently with weights
/// `n_k / sum(n)`, summed in ascending client order.
pub fn lora_aggregate<T: Scalar>(adapters: &[Weighted<LoraAdapter<T>>]) -> Result<LoraAdapter<T>> {
    let first = &adapters
        .first()
        .ok_or_else(|| FedError::EmptyInput("no adapters to aggregate".into()))?
        .value;
    if adapters.iter().any(|w| !w.value.same_shape(first)) {
        return Err(FedError::shape(
            "adapters differ in rank, alpha, target or shape",
        ));
    }
    let a = weighted_mean(adapters, |ad| &ad.a[..])?;
    let b = weighted_mean(adapters, |ad| &ad.b[..])?;
    let mut out = first.clone();
    out.a = a;
    out.b = b;
    Ok(out)
}

/// Local SGD on the adapter factors with the base weights frozen.
///
/// With `G = dL/dW_eff` for a target matrix and `s = alpha / r`:
/// `dL/dB = s G A^T` and `dL/dA = s B^T G`.
pub fn lora_local_train<T: Scalar, R: Rng + ?Sized>(
    spec: &ModelSpec,
    base: &ParamVector<T>,
    adapters: &[LoraAdapter<T>],
    data: &LabeledDataset<T>,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<Vec<LoraAdapter<T>>> {
    cfg.validate()?;
    spec.check_params(base)?;
    if data.is_empty() {
        return Err(FedError::EmptyInput(
            "lora_local_train on an empty dataset".into(),
        ));
    }
    let lr = T::of(cfg.lr);
    let examples = data.examples();
    let mut current = adapters.to_vec();
    for_each_batch(data.len(), cfg, rng, |batch| {
        let merged = merge_adapters(base, &current)?;
        let (_, grad) = loss_and_grad(spec, &merged, batch.iter().map(|&i| &examples[i]))?;
        for ad in &mut current {
            let g = grad.segment_values(&ad.target).expect("merged layout");
            let (r, d_in, d_out) = (ad.rank, ad.d_in, ad.d_out);
            let s = ad.scaling();
            let mut grad_a = vec![T::zero(); r * d_in];
            let mut grad_b = vec![T::zero(); d_out * r];
            for i in 0..d_out {
                let g_row = &g[i * d_in..(i + 1) * d_in];
                for k in 0..r {
                    let a_row = &ad.a[k * d_in..(k + 1) * d_in];
                    let dot: T = g_row.iter().zip(a_row).map(|(&x, &y)| x * y).sum();
                    grad_b[i * r + k] = s * dot;
                    let bik = ad.b[i * r + k];
                    for (ga, &gv) in grad_a[k * d_in..(k + 1) * d_in].iter_mut().zip(g_row) {
                        *ga += s * bik * gv;
                    }
                }
            }
            ad.a.iter_mut()
                .zip(&grad_a)
                .for_each(|(p, &d)| *p -= lr * d);
            ad.b.iter_mut()
                .zip(&grad_b)
                .for_each(|(p, &d)| *p -= lr * d);
        }
        Ok(())
    })?;
    Ok(current)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};

    #[test]
    fn zero_b_is_identity() {
        let mut rng = stream(1, Stream::AdapterInit, &[]);
        let ad = LoraAdapter::<f64>::init("w", 3, 2, 2, 32.0, 0.02, &mut rng).unwrap();
        let w = vec![0.1, -0.2, 0.3, 0.4, 0.5, -0.6];
        assert_eq!(lora_apply(&w, &ad).unwrap(), w);
    }

    #[test]
    fn rank_one_outer_product() {
        let ad = LoraAdapter::new("w", 2, 2, 1, 1.0, vec![0.0, 1.0], vec![1.0, 0.0]).unwrap();
        assert_eq!(
            lora_apply(&[0.0; 4], &ad).unwrap(),
            vec![0.0, 1.0, 0.0, 0.0]
        );
    }

    #[test]
    fn unit_scaling_when_alpha_equals_rank() {
        let a = vec![1.0_f64, 2.0, 3.0, 4.0];
        let b = vec![0.5, -1.0, 2.0, 0.25];
        let ad = LoraAdapter::new("w", 2, 2, 2, 2.0, a, b).unwrap();
        // B A by hand
        let ba = [0.5 - 3.0, 1.0 - 4.0, 2.0 + 0.75, 4.0 + 1.0];
        let w = [1.0, 1.0, 1.0, 1.0];
        let out = lora_apply(&w, &ad).unwrap();
        for (o, e) in out.iter().zip(ba) {
            assert!((o - (1.0 + e)).abs() < 1e-15);
        }
    }

    #[test]
    fn shape_errors() {
        let ad = LoraAdapter::new("w", 2, 2, 1, 1.0, vec![0.0, 1.0], vec![1.0, 0.0]).unwrap();
        assert!(matches!(
            lora_apply(&[0.0; 3], &ad),
            Err(FedError::Shape(_))
        ));
        assert!(LoraAdapter::<f64>::new("w", 2, 2, 0, 1.0, vec![], vec![]).is_err());
        assert!(LoraAdapter::<f64>::new("w", 2, 2, 1, 1.0, vec![0.0], vec![0.0, 0.0]).is_err());
    }

    fn pv(values: Vec<f64>) -> ParamVector<f64> {
        ParamVector::from_values(&[("x".to_string(), vec![values.len()])], values).unwrap()
    }

    #[test]
    fn clipping() {
        let inside = pv(vec![0.3, 0.4]);
        assert_eq!(clip_update(&inside, 1.0).unwrap(), inside);
        assert_eq!(
            clip_update(&pv(vec![2.0, 0.0]), 1.0).unwrap().values(),
            &[1.0, 0.0]
        );
        assert_eq!(
            clip_update(&pv(vec![0.0, 0.0]), 1.0).unwrap().values(),
            &[0.0, 0.0]
        );
        assert!(clip_update(&inside, 0.0).is_err());
    }

    #[test]
    fn quantize_hand_case() {
        let q = quantize4(&[-1.0f64, 0.5, 1.0]).unwrap();
        assert_eq!(q.codes, vec![-7, 4, 7]);
        assert!((q.scale - 1.0 / 7.0).abs() < 1e-16);
        let back = dequantize4(&q);
        assert!((back[1] - 4.0 / 7.0).abs() < 1e-15);
        let max_err = [-1.0, 0.5, 1.0]
            .iter()
            .zip(&back)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!((max_err - 1.0 / 14.0).abs() < 1e-15);
    }

    #[test]
    fn quantize_zero_and_empty() {
        let q = quantize4(&[0.0f64; 5]).unwrap();
        assert_eq!(q.scale, 0.0);
        assert_eq!(dequantize4(&q), vec![0.0; 5]);
        assert!(quantize4::<f64>(&[]).unwrap().is_empty());
        assert!(matches!(quantize4(&[f64::NAN]), Err(FedError::Numeric(_))));
        assert!(quantize4(&[f64::INFINITY]).is_err());
    }

    #[test]
    fn round_half_away_from_zero() {
        // x / scale = 3.5 and -3.5 exactly
        let q = quantize4(&[3.5f64, -3.5, 7.0]).unwrap();
        assert_eq!(q.codes, vec![4, -4, 7]);
    }

    #[test]
    fn nibble_packing() {
        let codes = vec![-7, 4, 7, -1, 0];
        let packed = pack4(&codes);
        assert_eq!(packed.len(), 3);
        assert_eq!(packed[0], 0x49); // low nibble 0x9 (-7), high nibble 0x4
        assert_eq!(unpack4(&packed, 5), codes);
    }

    #[test]
    fn payload_accounting() {
        assert_eq!(payload_bytes(16, 64, 64, 4).unwrap(), 1040);
        let dense = 64 * 64 * 4;
        let ratio = dense as f64 / 1040.0;
        assert!((ratio - 15.75).abs() < 0.01);
        assert!(matches!(
            payload_bytes(16, 64, 64, 3),
            Err(FedError::Config(_))
        ));
        assert!(payload_bytes(0, 64, 64, 4).is_err());
    }

    #[test]
    fn aggregate_weighted_entrywise() {
        let a1 = LoraAdapter::new("w", 1, 1, 1, 2.0, vec![1.0], vec![3.0]).unwrap();
        let a2 = LoraAdapter::new("w", 1, 1, 1, 2.0, vec![5.0], vec![-1.0]).unwrap();
        let out = lora_aggregate(&[Weighted::new(0, a1, 1), Weighted::new(1, a2, 3)]).unwrap();
        assert_eq!(out.a(), &[(1.0 * 1.0 + 3.0 * 5.0) / 4.0]);
        assert_eq!(out.b(), &[(1.0 * 3.0 - 3.0) / 4.0]);
    }

    #[test]
    fn aggregate_rejects_rank_mismatch() {
        let a1 = LoraAdapter::new("w", 1, 1, 1, 2.0, vec![1.0], vec![3.0]).unwrap();
        let a2 = LoraAdapter::new("w", 1, 1, 2, 2.0, vec![1.0, 1.0], vec![1.0, 1.0]).unwrap();
        assert!(matches!(
            lora_aggregate(&[Weighted::new(0, a1, 1), Weighted::new(1, a2, 1)]),
            Err(FedError::Shape(_))
        ));
    }

    #[test]
    fn opposite_a_factors_cancel() {
        let a1 = LoraAdapter::new("w", 2, 1, 1, 1.0, vec![1.0, -2.0], vec![3.0]).unwrap();
        let a2 = LoraAdapter::new("w", 2, 1, 1, 1.0, vec![-1.0, 2.0], vec![3.0]).unwrap();
        let out = lora_aggregate(&[Weighted::new(0, a1, 5), Weighted::new(1, a2, 5)]).unwrap();
        assert_eq!(out.a(), &[0.0, 0.0]);
        assert_eq!(out.delta_weight(), vec![0.0, 0.0]);
    }

    #[test]
    fn wire_round_trip() {
        let p = AdapterPayload {
            target: "hidden0.weight".to_string(),
            rank: 1,
            d_in: 2,
            d_out: 1,
            alpha: 32.0,
            a: quantize(&[-1.0f64, 0.5], vec![1, 2], 4).unwrap(),
            b: quantize(&[0.25f64], vec![1, 1], 4).unwrap(),
        };
        let bytes = p.encode().unwrap();
        assert_eq!(bytes.len(), 4 + 14 + 12 + 24 + 2);
        assert_eq!(AdapterPayload::<f64>::decode(&bytes).unwrap(), p);
        assert!(AdapterPayload::<f64>::decode(&bytes[..bytes.len() - 1]).is_err());
    }
}
