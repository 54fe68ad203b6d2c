use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;
use thiserror::Error;

use super::{ParamVector, Scalar};
use crate::codec::{DecodeError, Reader, Writer};

/// Hidden-layer nonlinearity. Both choices are smooth so Hessian products are exact.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Activation {
    Tanh,
    Softplus,
}

impl Activation {
    #[inline]
    fn apply<S: Scalar>(self, z: S) -> S {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Softplus => z.softplus(),
        }
    }

    /// Derivative given the pre-activation `z` and output `y`.
    #[inline]
    fn slope<S: Scalar>(self, z: S, y: S) -> S {
        match self {
            Activation::Tanh => S::cst(1.0) - y * y,
            Activation::Softplus => z.sigmoid(),
        }
    }

    fn code(self) -> u8 {
        match self {
            Activation::Tanh => 0,
            Activation::Softplus => 1,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(Activation::Tanh),
            1 => Some(Activation::Softplus),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Softplus => "softplus",
        }
    }
}

/// Fully connected network shape. The output layer is always affine.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct NetSpec {
    pub input_dim: usize,
    pub output_dim: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

/// Location of one affine layer inside a flat parameter vector.
///
/// Weights are stored row-major (`fan_out` rows of `fan_in`), followed by the bias.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerShape {
    pub offset: usize,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl LayerShape {
    pub fn weights(&self) -> core::ops::Range<usize> {
        self.offset..self.offset + self.fan_in * self.fan_out
    }

    pub fn bias(&self) -> core::ops::Range<usize> {
        let start = self.offset + self.fan_in * self.fan_out;
        start..start + self.fan_out
    }

    pub fn len(&self) -> usize {
        (self.fan_in + 1) * self.fan_out
    }

    pub fn is_empty(&self) -> bool {
        self.fan_out == 0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ShapeError {
    #[error("network dimensions must be positive")]
    ZeroWidth,
    #[error("{what}: expected length {expected}, got {got}")]
    Length { what: &'static str, expected: usize, got: usize },
}

impl NetSpec {
    pub fn new(input_dim: usize, hidden: &[usize], output_dim: usize) -> Self {
        Self { input_dim, output_dim, hidden: hidden.to_vec(), activation: Activation::Tanh }
    }

    pub fn validate(&self) -> Result<(), ShapeError> {
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden.contains(&0) {
            return Err(ShapeError::ZeroWidth);
        }
        Ok(())
    }

    fn widths(&self) -> impl Iterator<Item = usize> + '_ {
        core::iter::once(self.input_dim)
            .chain(self.hidden.iter().copied())
            .chain(core::iter::once(self.output_dim))
    }

    pub fn layers(&self) -> Vec<LayerShape> {
        let widths: Vec<usize> = self.widths().collect();
        let mut offset = 0;
        widths
            .windows(2)
            .map(|w| {
                let layer = LayerShape { offset, fan_in: w[0], fan_out: w[1] };
                offset += layer.len();
                layer
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers().iter().map(LayerShape::len).sum()
    }

    /// Uniform fan-in initialization: every weight and bias in `±1/sqrt(fan_in)`.
    pub fn init(&self, rng: &mut crate::rng::Rng) -> ParamVector {
        let mut values = vec![0.0; self.param_count()];
        for layer in self.layers() {
            let bound = 1.0 / libm::sqrt(layer.fan_in as f64);
            for v in &mut values[layer.offset..layer.offset + layer.len()] {
                *v = rng.random_range(-bound..bound);
            }
        }
        ParamVector::from(values)
    }

    /// Like [`NetSpec::init`] with the output layer shrunk by `output_scale`.
    pub fn init_scaled_output(&self, rng: &mut crate::rng::Rng, output_scale: f64) -> ParamVector {
        let mut p = self.init(rng);
        if let Some(last) = self.layers().last() {
            for v in &mut p[last.offset..last.offset + last.len()] {
                *v *= output_scale;
            }
        }
        p
    }

    pub(crate) fn encode(&self, w: &mut Writer) {
        w.u32(self.input_dim as u32);
        w.u32(self.output_dim as u32);
        w.u8(self.activation.code());
        w.u32(self.hidden.len() as u32);
        for &h in &self.hidden {
            w.u32(h as u32);
        }
    }

    pub(crate) fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        let input_dim = r.u32("input_dim")? as usize;
        let output_dim = r.u32("output_dim")? as usize;
        let activation = Activation::from_code(r.u8("activation")?)
            .ok_or(DecodeError::Invalid { what: "activation" })?;
        let depth = r.u32("hidden count")? as usize;
        if depth > 64 {
            return Err(DecodeError::Invalid { what: "hidden count" });
        }
        let hidden = (0..depth).map(|_| r.u32("hidden width").map(|h| h as usize)).collect::<Result<_, _>>()?;
        let spec = NetSpec { input_dim, output_dim, hidden, activation };
        spec.validate().map_err(|_| DecodeError::Invalid { what: "net dims" })?;
        Ok(spec)
    }
}

/// Activations recorded by [`forward_tape`] for a later [`backward`].
#[derive(Debug, Clone)]
pub struct Tape<S> {
    /// Input followed by each layer's output, concatenated.
    acts: Vec<S>,
    /// Pre-activations of hidden layers, concatenated.
    pre: Vec<S>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self { acts: Vec::new(), pre: Vec::new() }
    }
}

impl<S: Scalar> Tape<S> {
    pub fn output(&self, spec: &NetSpec) -> &[S] {
        &self.acts[self.acts.len() - spec.output_dim..]
    }
}

#[inline]
fn affine<S: Scalar>(params: &[S], layer: &LayerShape, x: &[S], out: &mut Vec<S>) {
    let w = &params[layer.weights()];
    let b = &params[layer.bias()];
    for (row, &bias) in w.chunks_exact(layer.fan_in).zip(b) {
        let mut acc = bias;
        for (&wij, &xj) in row.iter().zip(x) {
            acc += wij * xj;
        }
        out.push(acc);
    }
}

/// Inference-only forward pass.
pub fn forward<S: Scalar>(spec: &NetSpec, params: &[S], input: &[S]) -> Vec<S> {
    let mut tape = Tape::default();
    forward_tape(spec, params, input, &mut tape);
    let out = tape.output(spec).to_vec();
    out
}

/// Forward pass that records what [`backward`] needs.
///
/// # Panics
/// On input or parameter length mismatch.
pub fn forward_tape<S: Scalar>(spec: &NetSpec, params: &[S], input: &[S], tape: &mut Tape<S>) {
    assert_eq!(input.len(), spec.input_dim, "network input length");
    assert_eq!(params.len(), spec.param_count(), "network parameter length");
    tape.acts.clear();
    tape.pre.clear();
    tape.acts.extend_from_slice(input);
    let layers = spec.layers();
    let last = layers.len() - 1;
    let mut in_start = 0;
    for (k, layer) in layers.iter().enumerate() {
        let out_start = tape.acts.len();
        let (head, _) = tape.acts.split_at(out_start);
        let x: Vec<S> = head[in_start..].to_vec();
        let mut z = Vec::with_capacity(layer.fan_out);
        affine(params, layer, &x, &mut z);
        if k == last {
            tape.acts.extend_from_slice(&z);
        } else {
            for &zi in &z {
                tape.acts.push(spec.activation.apply(zi));
            }
            tape.pre.extend_from_slice(&z);
        }
        in_start = out_start;
    }
}

/// Reverse pass for the tape recorded by [`forward_tape`].
///
/// Parameter gradients are *accumulated* into `grad_params` when given; the
/// gradient with respect to the input is written to `grad_input` when given.
pub fn backward<S: Scalar>(
    spec: &NetSpec,
    params: &[S],
    tape: &Tape<S>,
    grad_out: &[S],
    mut grad_params: Option<&mut [S]>,
    grad_input: Option<&mut [S]>,
) {
    debug_assert_eq!(grad_out.len(), spec.output_dim);
    let layers = spec.layers();
    let last = layers.len() - 1;
    // Offsets of each layer's input inside `acts` and of each hidden pre-activation.
    let mut act_off = Vec::with_capacity(layers.len());
    let mut off = 0;
    for layer in &layers {
        act_off.push(off);
        off += layer.fan_in;
    }
    let mut pre_off = Vec::with_capacity(layers.len());
    let mut p = 0;
    for layer in &layers[..last] {
        pre_off.push(p);
        p += layer.fan_out;
    }

    let mut g: Vec<S> = grad_out.to_vec();
    let want_input = grad_input.is_some();
    for k in (0..layers.len()).rev() {
        let layer = &layers[k];
        if k != last {
            let z = &tape.pre[pre_off[k]..pre_off[k] + layer.fan_out];
            let y = &tape.acts[act_off[k + 1]..act_off[k + 1] + layer.fan_out];
            for ((gi, &zi), &yi) in g.iter_mut().zip(z).zip(y) {
                *gi *= spec.activation.slope(zi, yi);
            }
        }
        let x = &tape.acts[act_off[k]..act_off[k] + layer.fan_in];
        if let Some(gp) = grad_params.as_deref_mut() {
            let (gw, gb) = gp[layer.offset..layer.offset + layer.len()].split_at_mut(layer.fan_in * layer.fan_out);
            for ((row, gbi), &gi) in gw.chunks_exact_mut(layer.fan_in).zip(gb.iter_mut()).zip(&g) {
                *gbi += gi;
                for (gwij, &xj) in row.iter_mut().zip(x) {
                    *gwij += gi * xj;
                }
            }
        }
        if k == 0 && !want_input {
            break;
        }
        let w = &params[layer.weights()];
        let mut gx = vec![S::zero(); layer.fan_in];
        for (row, &gi) in w.chunks_exact(layer.fan_in).zip(&g) {
            for (gxj, &wij) in gx.iter_mut().zip(row) {
                *gxj += wij * gi;
            }
        }
        g = gx;
    }
    if let Some(gi) = grad_input {
        gi.copy_from_slice(&g);
    }
}

/// Network parameters with the header that makes them self-describing on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheckpoint {
    pub spec: NetSpec,
    pub seed: u64,
    pub params: ParamVector,
}

const CHECKPOINT_MAGIC: [u8; 4] = *b"SDMP";
const CHECKPOINT_VERSION: u32 = 1;

impl ParamCheckpoint {
    /// Header (`SDMP`, version, dims, activation, hidden widths, seed, count) then raw `f64` LE values.
    pub fn encode(&self, w: &mut Writer) {
        w.bytes(&CHECKPOINT_MAGIC);
        w.u32(CHECKPOINT_VERSION);
        self.spec.encode(w);
        w.u64(self.seed);
        w.f64s(&self.params);
    }

    pub fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        r.magic(CHECKPOINT_MAGIC)?;
        r.version(CHECKPOINT_VERSION)?;
        let spec = NetSpec::decode(r)?;
        let seed = r.u64("seed")?;
        let values = r.f64s("params")?;
        if values.len() != spec.param_count() {
            return Err(DecodeError::Invalid { what: "parameter count" });
        }
        Ok(Self { spec, seed, params: ParamVector::from(values) })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        self.encode(&mut w);
        w.into_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::new(bytes);
        let out = Self::decode(&mut r)?;
        r.finish()?;
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::Dual;
    use crate::rng;

    #[test]
    fn zero_params_give_zero_output() {
        let spec = NetSpec::new(3, &[5, 4], 2);
        let params = vec![0.0; spec.param_count()];
        assert_eq!(forward(&spec, &params, &[1.0, -2.0, 3.0]), [0.0, 0.0]);
    }

    #[test]
    fn identity_linear_layer() {
        let spec = NetSpec::new(3, &[], 3);
        let mut params = vec![0.0; spec.param_count()];
        for i in 0..3 {
            params[i * 3 + i] = 1.0;
        }
        assert_eq!(forward(&spec, &params, &[0.5, -1.5, 2.0]), [0.5, -1.5, 2.0]);
    }

    #[test]
    fn forward_is_deterministic_under_a_seed() {
        let spec = NetSpec::new(4, &[8, 8], 2);
        let p1 = spec.init(&mut rng::stream(11, "net"));
        let p2 = spec.init(&mut rng::stream(11, "net"));
        assert_eq!(p1, p2);
        let x = [0.1, 0.2, -0.3, 0.4];
        assert_eq!(forward(&spec, &p1, &x), forward(&spec, &p2, &x));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let spec = NetSpec { activation: Activation::Softplus, ..NetSpec::new(3, &[6, 5], 2) };
        let params = spec.init(&mut rng::stream(5, "fd"));
        let x = [0.3, -0.7, 1.1];
        let w = [0.8, -1.3];
        let f = |p: &[f64], x: &[f64]| {
            let y = forward(&spec, p, x);
            y[0] * w[0] + y[1] * w[1]
        };
        let mut tape = Tape::default();
        forward_tape(&spec, &params, &x, &mut tape);
        let mut gp = vec![0.0; spec.param_count()];
        let mut gx = vec![0.0; 3];
        backward(&spec, &params, &tape, &w, Some(&mut gp), Some(&mut gx));
        let h = 1e-6;
        for i in (0..params.len()).step_by(3) {
            let mut pp = params.to_vec();
            let mut pm = params.to_vec();
            pp[i] += h;
            pm[i] -= h;
            let fd = (f(&pp, &x) - f(&pm, &x)) / (2.0 * h);
            assert!((fd - gp[i]).abs() < 1e-8, "param {i}: {fd} vs {}", gp[i]);
        }
        for j in 0..3 {
            let mut xp = x;
            let mut xm = x;
            xp[j] += h;
            xm[j] -= h;
            let fd = (f(&params, &xp) - f(&params, &xm)) / (2.0 * h);
            assert!((fd - gx[j]).abs() < 1e-8);
        }
    }

    #[test]
    fn dual_forward_carries_the_directional_derivative() {
        let spec = NetSpec::new(2, &[4], 1);
        let params = spec.init(&mut rng::stream(1, "dual"));
        let x = [0.4, -0.2];
        let dir = [1.0, 0.5];
        let xd: Vec<Dual> = x.iter().zip(&dir).map(|(&v, &d)| Dual::new(v, d)).collect();
        let pd: Vec<Dual> = params.iter().map(|&v| Dual::cst(v)).collect();
        let y = forward(&spec, &pd, &xd)[0];
        let h = 1e-6;
        let yp = forward(&spec, &params, &[x[0] + h, x[1] + 0.5 * h])[0];
        let ym = forward(&spec, &params, &[x[0] - h, x[1] - 0.5 * h])[0];
        assert!((y.du - (yp - ym) / (2.0 * h)).abs() < 1e-9);
    }

    #[test]
    fn checkpoint_round_trip_and_header() {
        let spec = NetSpec::new(4, &[3], 2);
        let ck = ParamCheckpoint { spec: spec.clone(), seed: 99, params: spec.init(&mut rng::stream(99, "ck")) };
        let bytes = ck.to_bytes();
        assert_eq!(&bytes[..4], b"SDMP");
        assert_eq!(ParamCheckpoint::from_bytes(&bytes).unwrap(), ck);
        let mut bad = bytes.clone();
        bad.truncate(bytes.len() - 3);
        assert!(ParamCheckpoint::from_bytes(&bad).is_err());
    }
}
