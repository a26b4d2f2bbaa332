//! Convolutional building blocks with hand-written backward passes.
//!
//! Every layer reads its weights from a flat parameter buffer through
//! [`Slot`]s and accumulates gradients into a buffer of the same layout.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::params::{name_hash, ParamStore, Slot};
use crate::rng;
use crate::scalar::Scalar;

/// Channels x height x width feature map of one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct FMap<T> {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> FMap<T> {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![T::zero(); channels * height * width],
        }
    }

    pub fn new(channels: usize, height: usize, width: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), channels * height * width, "feature map size");
        Self {
            channels,
            height,
            width,
            data,
        }
    }

    pub fn plane(&self, c: usize) -> &[T] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    /// Channel-wise concatenation.
    pub fn concat(&self, other: &FMap<T>) -> Option<FMap<T>> {
        if self.height != other.height || self.width != other.width {
            return None;
        }
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Some(FMap::new(self.channels + other.channels, self.height, self.width, data))
    }

    /// Inverse of [`FMap::concat`].
    pub fn split_channels(&self, first: usize) -> (FMap<T>, FMap<T>) {
        let n = self.height * self.width;
        (
            FMap::new(first, self.height, self.width, self.data[..first * n].to_vec()),
            FMap::new(self.channels - first, self.height, self.width, self.data[first * n..].to_vec()),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    /// x * sigmoid(x); smooth, so finite-difference checks are well posed.
    #[default]
    Silu,
}

impl Activation {
    #[inline]
    pub fn apply<T: Scalar>(self, z: T) -> T {
        match self {
            Activation::Relu => z.max(T::zero()),
            Activation::Silu => z / (T::one() + (-z).exp()),
        }
    }

    #[inline]
    pub fn derivative<T: Scalar>(self, z: T) -> T {
        match self {
            Activation::Relu => {
                if z > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Silu => {
                let s = T::one() / (T::one() + (-z).exp());
                s * (T::one() + z * (T::one() - s))
            }
        }
    }

    fn map<T: Scalar>(self, z: &FMap<T>) -> FMap<T> {
        FMap {
            data: z.data.iter().map(|&v| self.apply(v)).collect(),
            ..*z
        }
    }

    /// dz = dy * act'(z), in place on `dy`.
    fn backprop<T: Scalar>(self, z: &FMap<T>, dy: &mut FMap<T>) {
        for (d, &zv) in dy.data.iter_mut().zip(&z.data) {
            *d *= self.derivative(zv);
        }
    }
}

fn normal_init<T: Scalar>(store: &mut ParamStore<T>, seed: u64, name: String, shape: Vec<usize>, std: f64) -> Slot {
    let mut r = rng::stream(seed, &[name_hash(&name)]);
    let dist = Normal::new(0.0, std).expect("positive std");
    store.alloc(name, shape, || T::of(dist.sample(&mut r)))
}

fn zero_init<T: Scalar>(store: &mut ParamStore<T>, name: String, shape: Vec<usize>) -> Slot {
    store.alloc(name, shape, T::zero)
}

/// Square-kernel 2-D convolution with bias and zero padding.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub weight: Slot,
    pub bias: Slot,
}

impl Conv2d {
    pub fn build<T: Scalar>(
        store: &mut ParamStore<T>,
        seed: u64,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
    ) -> Self {
        let fan_in = (in_ch * kernel * kernel) as f64;
        let weight = normal_init(
            store,
            seed,
            format!("{name}.weight"),
            vec![out_ch, in_ch, kernel, kernel],
            (2.0 / fan_in).sqrt(),
        );
        let bias = zero_init(store, format!("{name}.bias"), vec![out_ch]);
        Self {
            in_ch,
            out_ch,
            kernel,
            stride,
            pad: kernel / 2,
            weight,
            bias,
        }
    }

    pub fn param_count(&self) -> usize {
        self.weight.len + self.bias.len
    }

    pub fn out_size(&self, n: usize) -> usize {
        (n + 2 * self.pad - self.kernel) / self.stride + 1
    }

    /// Output positions `o` with `0 <= o * stride + k - pad < n`.
    #[inline]
    fn valid_range(&self, k: usize, n_in: usize, n_out: usize) -> (usize, usize) {
        let s = self.stride;
        let shift = k as isize - self.pad as isize;
        let lo = if shift >= 0 { 0 } else { ((-shift) as usize).div_ceil(s) };
        let hi_excl = {
            let limit = n_in as isize - shift;
            if limit <= 0 {
                0
            } else {
                ((limit as usize - 1) / s + 1).min(n_out)
            }
        };
        (lo, hi_excl.max(lo))
    }

    pub fn forward<T: Scalar>(&self, p: &[T], x: &FMap<T>) -> FMap<T> {
        debug_assert_eq!(x.channels, self.in_ch);
        let (h, w) = (x.height, x.width);
        let (oh, ow) = (self.out_size(h), self.out_size(w));
        let k = self.kernel;
        let s = self.stride;
        let weight = self.weight.of(p);
        let bias = self.bias.of(p);
        let mut out = FMap::zeros(self.out_ch, oh, ow);
        let plane = oh * ow;
        for o in 0..self.out_ch {
            let dst = &mut out.data[o * plane..(o + 1) * plane];
            dst.iter_mut().for_each(|v| *v = bias[o]);
            for i in 0..self.in_ch {
                let src = x.plane(i);
                for kh in 0..k {
                    let (y0, y1) = self.valid_range(kh, h, oh);
                    for kw in 0..k {
                        let wv = weight[((o * self.in_ch + i) * k + kh) * k + kw];
                        let (x0, x1) = self.valid_range(kw, w, ow);
                        for oy in y0..y1 {
                            let iy = oy * s + kh - self.pad;
                            let srow = &src[iy * w..(iy + 1) * w];
                            let drow = &mut dst[oy * ow..(oy + 1) * ow];
                            for ox in x0..x1 {
                                drow[ox] += wv * srow[ox * s + kw - self.pad];
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Accumulates weight/bias gradients; returns the input gradient when asked.
    pub fn backward<T: Scalar>(&self, p: &[T], x: &FMap<T>, dy: &FMap<T>, grad: &mut [T], need_dx: bool) -> Option<FMap<T>> {
        let (h, w) = (x.height, x.width);
        let (oh, ow) = (dy.height, dy.width);
        let k = self.kernel;
        let s = self.stride;
        let weight = self.weight.of(p);
        let plane = oh * ow;
        let mut dx = need_dx.then(|| FMap::zeros(self.in_ch, h, w));
        {
            let db = self.bias.of_mut(grad);
            for o in 0..self.out_ch {
                db[o] += dy.data[o * plane..(o + 1) * plane].iter().copied().sum::<T>();
            }
        }
        for o in 0..self.out_ch {
            let g = &dy.data[o * plane..(o + 1) * plane];
            for i in 0..self.in_ch {
                let src = x.plane(i);
                for kh in 0..k {
                    let (y0, y1) = self.valid_range(kh, h, oh);
                    for kw in 0..k {
                        let widx = ((o * self.in_ch + i) * k + kh) * k + kw;
                        let (x0, x1) = self.valid_range(kw, w, ow);
                        let mut acc = T::zero();
                        for oy in y0..y1 {
                            let iy = oy * s + kh - self.pad;
                            let srow = &src[iy * w..(iy + 1) * w];
                            let grow = &g[oy * ow..(oy + 1) * ow];
                            for ox in x0..x1 {
                                acc += grow[ox] * srow[ox * s + kw - self.pad];
                            }
                        }
                        grad[self.weight.offset + widx] += acc;
                        if let Some(dx) = dx.as_mut() {
                            let wv = weight[widx];
                            let dplane = &mut dx.data[i * h * w..(i + 1) * h * w];
                            for oy in y0..y1 {
                                let iy = oy * s + kh - self.pad;
                                let grow = &g[oy * ow..(oy + 1) * ow];
                                let drow = &mut dplane[iy * w..(iy + 1) * w];
                                for ox in x0..x1 {
                                    drow[ox * s + kw - self.pad] += wv * grow[ox];
                                }
                            }
                        }
                    }
                }
            }
        }
        dx
    }
}

/// Fully connected layer, weight stored `[out, in]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub in_features: usize,
    pub out_features: usize,
    pub weight: Slot,
    pub bias: Slot,
}

impl Linear {
    pub fn build<T: Scalar>(store: &mut ParamStore<T>, seed: u64, name: &str, in_features: usize, out_features: usize) -> Self {
        let weight = normal_init(
            store,
            seed,
            format!("{name}.weight"),
            vec![out_features, in_features],
            (1.0 / in_features as f64).sqrt(),
        );
        let bias = zero_init(store, format!("{name}.bias"), vec![out_features]);
        Self {
            in_features,
            out_features,
            weight,
            bias,
        }
    }

    pub fn param_count(&self) -> usize {
        self.weight.len + self.bias.len
    }

    pub fn forward<T: Scalar>(&self, p: &[T], x: &[T]) -> Vec<T> {
        debug_assert_eq!(x.len(), self.in_features);
        let w = self.weight.of(p);
        let b = self.bias.of(p);
        (0..self.out_features)
            .map(|o| {
                let row = &w[o * self.in_features..(o + 1) * self.in_features];
                b[o] + row.iter().zip(x).map(|(&a, &v)| a * v).sum::<T>()
            })
            .collect()
    }

    pub fn backward<T: Scalar>(&self, p: &[T], x: &[T], dy: &[T], grad: &mut [T], need_dx: bool) -> Option<Vec<T>> {
        let n_in = self.in_features;
        for o in 0..self.out_features {
            grad[self.bias.offset + o] += dy[o];
            let row = &mut grad[self.weight.offset + o * n_in..self.weight.offset + (o + 1) * n_in];
            for (g, &v) in row.iter_mut().zip(x) {
                *g += dy[o] * v;
            }
        }
        need_dx.then(|| {
            let w = self.weight.of(p);
            let mut dx = vec![T::zero(); n_in];
            for o in 0..self.out_features {
                let row = &w[o * n_in..(o + 1) * n_in];
                for (d, &a) in dx.iter_mut().zip(row) {
                    *d += a * dy[o];
                }
            }
            dx
        })
    }
}

pub fn global_avg_pool<T: Scalar>(x: &FMap<T>) -> Vec<T> {
    let n = T::of((x.height * x.width) as f64);
    (0..x.channels).map(|c| x.plane(c).iter().copied().sum::<T>() / n).collect()
}

pub fn global_avg_pool_backward<T: Scalar>(dp: &[T], channels: usize, height: usize, width: usize) -> FMap<T> {
    let n = T::of((height * width) as f64);
    let mut out = FMap::zeros(channels, height, width);
    let plane = height * width;
    for c in 0..channels {
        let v = dp[c] / n;
        out.data[c * plane..(c + 1) * plane].iter_mut().for_each(|d| *d = v);
    }
    out
}

/// Two 3x3 convolutions with a projection shortcut when shape changes.
#[derive(Debug, Clone)]
pub struct ResBlock {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub shortcut: Option<Conv2d>,
}

impl ResBlock {
    pub fn build<T: Scalar>(store: &mut ParamStore<T>, seed: u64, name: &str, in_ch: usize, out_ch: usize, stride: usize) -> Self {
        let conv1 = Conv2d::build(store, seed, &format!("{name}.conv1"), in_ch, out_ch, 3, stride);
        let conv2 = Conv2d::build(store, seed, &format!("{name}.conv2"), out_ch, out_ch, 3, 1);
        let shortcut = (stride != 1 || in_ch != out_ch)
            .then(|| Conv2d::build(store, seed, &format!("{name}.shortcut"), in_ch, out_ch, 1, stride));
        Self { conv1, conv2, shortcut }
    }

    pub fn param_count(&self) -> usize {
        self.conv1.param_count() + self.conv2.param_count() + self.shortcut.as_ref().map_or(0, Conv2d::param_count)
    }
}

/// Stem convolution or residual block.
#[derive(Debug, Clone)]
pub enum Unit {
    Stem(Conv2d),
    Block(ResBlock),
}

impl Unit {
    pub fn param_count(&self) -> usize {
        match self {
            Unit::Stem(c) => c.param_count(),
            Unit::Block(b) => b.param_count(),
        }
    }
}

#[derive(Debug, Clone)]
enum UnitTape<T> {
    Stem { x: FMap<T>, z: FMap<T> },
    Block { x: FMap<T>, z1: FMap<T>, a1: FMap<T>, z: FMap<T> },
}

/// Recorded activations of a chain forward pass.
#[derive(Debug, Clone)]
pub struct ChainTape<T> {
    units: Vec<UnitTape<T>>,
}

/// A sequential run of units with marked stage boundaries.
#[derive(Debug, Clone)]
pub struct Chain {
    pub units: Vec<Unit>,
    /// Unit count after which each stage ends.
    pub stage_ends: Vec<usize>,
    pub activation: Activation,
}

impl Chain {
    pub fn param_count(&self) -> usize {
        self.units.iter().map(Unit::param_count).sum()
    }

    pub fn out_channels(&self) -> usize {
        match self.units.last() {
            Some(Unit::Stem(c)) => c.out_ch,
            Some(Unit::Block(b)) => b.conv2.out_ch,
            None => 0,
        }
    }

    /// Forward pass; returns the output of each stage and, when `record`
    /// is set, the activations needed for backward.
    pub fn forward<T: Scalar>(&self, p: &[T], x: &FMap<T>, record: bool) -> (Vec<FMap<T>>, Option<ChainTape<T>>) {
        let act = self.activation;
        let mut tape = record.then(|| ChainTape { units: Vec::with_capacity(self.units.len()) });
        let mut stages = Vec::with_capacity(self.stage_ends.len());
        let mut cur = x.clone();
        for (idx, unit) in self.units.iter().enumerate() {
            let next = match unit {
                Unit::Stem(conv) => {
                    let z = conv.forward(p, &cur);
                    let y = act.map(&z);
                    if let Some(t) = tape.as_mut() {
                        t.units.push(UnitTape::Stem { x: cur, z });
                    }
                    y
                }
                Unit::Block(b) => {
                    let z1 = b.conv1.forward(p, &cur);
                    let a1 = act.map(&z1);
                    let mut z = b.conv2.forward(p, &a1);
                    match &b.shortcut {
                        Some(sc) => {
                            let s = sc.forward(p, &cur);
                            z.data.iter_mut().zip(&s.data).for_each(|(a, &v)| *a += v);
                        }
                        None => z.data.iter_mut().zip(&cur.data).for_each(|(a, &v)| *a += v),
                    }
                    let y = act.map(&z);
                    if let Some(t) = tape.as_mut() {
                        t.units.push(UnitTape::Block { x: cur, z1, a1, z });
                    }
                    y
                }
            };
            cur = next;
            if self.stage_ends.contains(&(idx + 1)) {
                stages.push(cur.clone());
            }
        }
        if stages.is_empty() || self.stage_ends.last() != Some(&self.units.len()) {
            stages.push(cur);
        }
        (stages, tape)
    }

    /// Backward from the gradient at the chain output.
    pub fn backward<T: Scalar>(&self, p: &[T], tape: &ChainTape<T>, dy: FMap<T>, grad: &mut [T], need_dx: bool) -> Option<FMap<T>> {
        let act = self.activation;
        let mut d = dy;
        for (idx, (unit, rec)) in self.units.iter().zip(&tape.units).enumerate().rev() {
            let want_dx = need_dx || idx > 0;
            match (unit, rec) {
                (Unit::Stem(conv), UnitTape::Stem { x, z }) => {
                    act.backprop(z, &mut d);
                    match conv.backward(p, x, &d, grad, want_dx) {
                        Some(dx) => d = dx,
                        None => return None,
                    }
                }
                (Unit::Block(b), UnitTape::Block { x, z1, a1, z }) => {
                    act.backprop(z, &mut d);
                    let mut da1 = b.conv2.backward(p, a1, &d, grad, true).expect("dx requested");
                    let d_short = match &b.shortcut {
                        Some(sc) => sc.backward(p, x, &d, grad, want_dx),
                        None => want_dx.then(|| d.clone()),
                    };
                    act.backprop(z1, &mut da1);
                    let d_main = b.conv1.backward(p, x, &da1, grad, want_dx);
                    match (d_main, d_short) {
                        (Some(mut m), Some(s)) => {
                            m.data.iter_mut().zip(&s.data).for_each(|(a, &v)| *a += v);
                            d = m;
                        }
                        _ => return None,
                    }
                }
                _ => unreachable!("tape does not match chain"),
            }
        }
        Some(d)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Finite-difference check of one conv layer through a random linear readout.
    #[test]
    fn conv_gradients_match_finite_differences() {
        for &(stride, k) in &[(1usize, 3usize), (2, 3), (2, 1)] {
            let mut store = ParamStore::<f64>::new();
            let conv = Conv2d::build(&mut store, 3, "c", 2, 3, k, stride);
            // non-zero bias
            for (i, v) in store.data_mut().iter_mut().enumerate().skip(conv.bias.offset) {
                *v = 0.1 * i as f64;
            }
            let x = FMap::new(2, 5, 6, (0..60).map(|i| ((i * 37 % 17) as f64 - 8.0) / 8.0).collect());
            let out = conv.forward(store.data(), &x);
            let readout: Vec<f64> = (0..out.data.len()).map(|i| ((i * 13 % 7) as f64 - 3.0) / 3.0).collect();
            let loss = |p: &[f64], x: &FMap<f64>| -> f64 {
                conv.forward(p, x).data.iter().zip(&readout).map(|(a, b)| a * b).sum()
            };
            let dy = FMap::new(out.channels, out.height, out.width, readout.clone());
            let mut grad = vec![0.0; store.len()];
            let dx = conv.backward(store.data(), &x, &dy, &mut grad, true).unwrap();
            let h = 1e-6;
            let mut p = store.data().to_vec();
            for i in 0..p.len() {
                let orig = p[i];
                p[i] = orig + h;
                let up = loss(&p, &x);
                p[i] = orig - h;
                let down = loss(&p, &x);
                p[i] = orig;
                assert!(((up - down) / (2.0 * h) - grad[i]).abs() < 1e-6, "param {i}");
            }
            let mut xx = x.clone();
            for i in 0..xx.data.len() {
                let orig = xx.data[i];
                xx.data[i] = orig + h;
                let up = loss(&p, &xx);
                xx.data[i] = orig - h;
                let down = loss(&p, &xx);
                xx.data[i] = orig;
                assert!(((up - down) / (2.0 * h) - dx.data[i]).abs() < 1e-6, "input {i}");
            }
        }
    }

    #[test]
    fn conv_output_sizes() {
        let mut store = ParamStore::<f32>::new();
        let c = Conv2d::build(&mut store, 0, "c", 1, 1, 3, 2);
        assert_eq!(c.out_size(16), 8);
        assert_eq!(c.out_size(8), 4);
        assert_eq!(c.out_size(2), 1);
        assert_eq!(c.out_size(1), 1);
    }

    #[test]
    fn silu_derivative() {
        for &z in &[-3.0f64, -0.5, 0.0, 0.7, 4.0] {
            let h = 1e-6;
            let fd = (Activation::Silu.apply(z + h) - Activation::Silu.apply(z - h)) / (2.0 * h);
            assert!((fd - Activation::Silu.derivative(z)).abs() < 1e-8);
        }
    }
}
