//! Minimal network building blocks on top of candle.
//!
//! Convolutions go through a custom im2col + GEMM operator with a hand-written
//! backward pass; candle's own CPU convolution backward is several times
//! slower on single-core machines. Parameters live in a [`ParamStore`] keyed
//! by name in sorted order so digests, copies and moving averages are
//! deterministic.

use std::collections::{BTreeMap, HashMap};

use candle_core::{CpuStorage, CustomOp2, DType, Device, Layout, Shape, Tensor, Var, WithDType};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::to_hex;

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn new(x: &[usize], w: &[usize], stride: usize, pad: usize) -> candle_core::Result<Self> {
        if x.len() != 4 || w.len() != 4 || x[1] != w[1] || w[2] != w[3] {
            candle_core::bail!("conv2d: incompatible input {x:?} and weight {w:?}");
        }
        let (h, wd, k) = (x[2], x[3], w[2]);
        if h + 2 * pad < k || wd + 2 * pad < k {
            candle_core::bail!("conv2d: input {x:?} smaller than kernel {k}");
        }
        Ok(Self {
            n: x[0],
            c: x[1],
            h,
            w: wd,
            o: w[0],
            k,
            stride,
            pad,
            ho: (h + 2 * pad - k) / stride + 1,
            wo: (wd + 2 * pad - k) / stride + 1,
        })
    }

    fn col_rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn out_plane(&self) -> usize {
        self.ho * self.wo
    }

    fn in_image(&self) -> usize {
        self.c * self.h * self.w
    }
}

trait ConvFloat: WithDType + Copy + Default + std::ops::AddAssign {
    /// Row-major `C = A * B + beta * C` with arbitrary strides on `A` and `B`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
    );
}

macro_rules! impl_conv_float {
    ($t:ty, $f:path) => {
        impl ConvFloat for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                beta: Self,
                c: &mut [Self],
            ) {
                assert!(c.len() >= m * n);
                // SAFETY: the callers size `a`, `b` and `c` for the given
                // dimensions and strides; `c` is checked above.
                unsafe {
                    $f(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    )
                }
            }
        }
    };
}

impl_conv_float!(f32, matrixmultiply::sgemm);
impl_conv_float!(f64, matrixmultiply::dgemm);

fn im2col<T: ConvFloat>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let plane = g.out_plane();
    for c in 0..g.c {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let drow = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        drow.fill(T::default());
                        continue;
                    }
                    let src = &x[(c * g.h + iy as usize) * g.w..][..g.w];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize {
                            T::default()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: ConvFloat>(cols: &[T], g: &ConvGeom, x: &mut [T]) {
    let plane = g.out_plane();
    for c in 0..g.c {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut x[(c * g.h + iy as usize) * g.w..][..g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            dst[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn conv_forward<T: ConvFloat>(x: &[T], w: &[T], g: &ConvGeom) -> Vec<T> {
    let (rows, plane) = (g.col_rows(), g.out_plane());
    let mut cols = vec![T::default(); rows * plane];
    let mut y = vec![T::default(); g.n * g.o * plane];
    for i in 0..g.n {
        im2col(&x[i * g.in_image()..], g, &mut cols);
        T::gemm(
            g.o,
            rows,
            plane,
            w,
            rows as isize,
            1,
            &cols,
            plane as isize,
            1,
            T::default(),
            &mut y[i * g.o * plane..(i + 1) * g.o * plane],
        );
    }
    y
}

fn conv_backward<T: ConvFloat>(x: &[T], w: &[T], dy: &[T], g: &ConvGeom) -> (Vec<T>, Vec<T>) {
    let (rows, plane) = (g.col_rows(), g.out_plane());
    let one = T::from_f64(1.0);
    let mut cols = vec![T::default(); rows * plane];
    let mut dw = vec![T::default(); g.o * rows];
    let mut dx = vec![T::default(); g.n * g.in_image()];
    for i in 0..g.n {
        let dyi = &dy[i * g.o * plane..(i + 1) * g.o * plane];
        im2col(&x[i * g.in_image()..], g, &mut cols);
        // dW += dY * cols^T
        T::gemm(g.o, plane, rows, dyi, plane as isize, 1, &cols, 1, plane as isize, one, &mut dw);
        // dcols = W^T * dY
        T::gemm(rows, g.o, plane, w, 1, rows as isize, dyi, plane as isize, 1, T::default(), &mut cols);
        col2im(&cols, g, &mut dx[i * g.in_image()..(i + 1) * g.in_image()]);
    }
    (dx, dw)
}

struct Conv2dOp {
    stride: usize,
    pad: usize,
}

fn contiguous<'a, T>(v: &'a [T], l: &Layout) -> candle_core::Result<&'a [T]> {
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&v[a..b]),
        None => candle_core::bail!("conv2d expects contiguous operands"),
    }
}

impl CustomOp2 for Conv2dOp {
    fn name(&self) -> &'static str {
        "im2col-conv2d"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = ConvGeom::new(l1.dims(), l2.dims(), self.stride, self.pad)?;
        let shape = Shape::from((g.n, g.o, g.ho, g.wo));
        match (s1, s2) {
            (CpuStorage::F32(x), CpuStorage::F32(w)) => Ok((
                CpuStorage::F32(conv_forward(contiguous(x, l1)?, contiguous(w, l2)?, &g)),
                shape,
            )),
            (CpuStorage::F64(x), CpuStorage::F64(w)) => Ok((
                CpuStorage::F64(conv_forward(contiguous(x, l1)?, contiguous(w, l2)?, &g)),
                shape,
            )),
            _ => candle_core::bail!("conv2d supports matching f32 or f64 operands"),
        }
    }

    fn bwd(
        &self,
        x: &Tensor,
        w: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let g = ConvGeom::new(x.dims(), w.dims(), self.stride, self.pad)?;
        fn run<T: ConvFloat>(
            x: &Tensor,
            w: &Tensor,
            grad: &Tensor,
            g: &ConvGeom,
        ) -> candle_core::Result<(Tensor, Tensor)> {
            let xv = x.flatten_all()?.to_vec1::<T>()?;
            let wv = w.flatten_all()?.to_vec1::<T>()?;
            let dyv = grad.flatten_all()?.to_vec1::<T>()?;
            let (dx, dw) = conv_backward(&xv, &wv, &dyv, g);
            Ok((
                Tensor::from_vec(dx, x.shape(), x.device())?,
                Tensor::from_vec(dw, w.shape(), w.device())?,
            ))
        }
        let (dx, dw) = match x.dtype() {
            DType::F32 => run::<f32>(x, w, grad, &g)?,
            DType::F64 => run::<f64>(x, w, grad, &g)?,
            dt => candle_core::bail!("conv2d backward: unsupported dtype {dt:?}"),
        };
        Ok((Some(dx), Some(dw)))
    }
}

/// 2-D cross-correlation, `x: N x C x H x W`, `w: O x C x K x K`.
pub fn conv2d(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let x = x.contiguous()?;
    let w = w.contiguous()?;
    Ok(x.apply_op2(&w, Conv2dOp { stride, pad })?)
}

/// Named, ordered collection of trainable variables.
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(dtype: DType, device: &Device) -> Self {
        Self {
            vars: BTreeMap::new(),
            dtype,
            device: device.clone(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn insert(&mut self, name: String, values: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        if self.vars.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter {name}")));
        }
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let handle = var.as_tensor().clone();
        self.vars.insert(name, var);
        Ok(handle)
    }

    /// He-uniform weights with fan-in taken from all but the first dimension.
    pub fn weight(&mut self, name: String, shape: &[usize], rng: &mut impl Rng) -> Result<Tensor> {
        let fan_in: usize = shape[1..].iter().product();
        let bound = (6.0 / fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        let values = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
        self.insert(name, values, shape)
    }

    pub fn zeros(&mut self, name: String, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        self.insert(name, vec![0.0; n], shape)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(String::as_str)
    }

    pub fn vars(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    fn check_compatible(&self, other: &ParamStore) -> Result<()> {
        if self.vars.len() != other.vars.len() {
            return Err(Error::shape(format!(
                "parameter sets differ in size: {} vs {}",
                self.vars.len(),
                other.vars.len()
            )));
        }
        for ((na, va), (nb, vb)) in self.vars.iter().zip(&other.vars) {
            if na != nb || va.shape() != vb.shape() {
                return Err(Error::shape(format!(
                    "parameter {na} {:?} vs {nb} {:?}",
                    va.shape(),
                    vb.shape()
                )));
            }
        }
        Ok(())
    }

    /// Overwrites every variable with the matching one from `other`.
    pub fn copy_from(&self, other: &ParamStore) -> Result<()> {
        self.check_compatible(other)?;
        for (dst, src) in self.vars.values().zip(other.vars.values()) {
            dst.set(&src.as_tensor().to_dtype(self.dtype)?.copy()?)?;
        }
        Ok(())
    }

    /// `self <- decay * self + (1 - decay) * other`, element-wise.
    pub fn ema_from(&self, other: &ParamStore, decay: f64) -> Result<()> {
        self.check_compatible(other)?;
        for (dst, src) in self.vars.values().zip(other.vars.values()) {
            let next = ((dst.as_tensor() * decay)? + (src.as_tensor() * (1.0 - decay))?)?;
            dst.set(&next)?;
        }
        Ok(())
    }

    /// SHA-256 over names, shapes and raw values.
    pub fn digest(&self) -> Result<String> {
        let mut h = Sha256::new();
        for (name, var) in &self.vars {
            h.update(name.as_bytes());
            for d in var.dims() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in var.as_tensor().flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()? {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        Ok(to_hex(&h.finalize()))
    }

    /// Flattened `f64` copies of every variable, in name order.
    pub fn snapshot(&self) -> Result<Vec<Vec<f64>>> {
        self.vars
            .values()
            .map(|v| Ok(v.as_tensor().flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?))
            .collect()
    }

    pub fn tensors(&self) -> HashMap<String, Tensor> {
        self.vars
            .iter()
            .map(|(k, v)| (k.clone(), v.as_tensor().clone()))
            .collect()
    }

    /// Loads values by name; every variable must be present with its shape.
    pub fn load_tensors(&self, tensors: &HashMap<String, Tensor>) -> Result<()> {
        if tensors.len() != self.vars.len() {
            return Err(Error::shape(format!(
                "archive holds {} tensors, model expects {}",
                tensors.len(),
                self.vars.len()
            )));
        }
        for (name, var) in &self.vars {
            let t = tensors
                .get(name)
                .ok_or_else(|| Error::shape(format!("archive is missing {name}")))?;
            if t.shape() != var.shape() {
                return Err(Error::shape(format!(
                    "{name}: archive {:?} vs model {:?}",
                    t.shape(),
                    var.shape()
                )));
            }
            var.set(&t.to_dtype(self.dtype)?.to_device(&self.device)?)?;
        }
        Ok(())
    }

    pub fn all_finite(&self) -> Result<bool> {
        for v in self.vars.values() {
            let s = v.as_tensor().to_dtype(DType::F64)?.abs()?.sum_all()?.to_scalar::<f64>()?;
            if !s.is_finite() {
                return Ok(false);
            }
        }
        Ok(true)
    }
}

/// Seeded generator for parameter initialization.
pub fn init_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub struct Conv {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
    pad: usize,
}

impl Conv {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            weight: ps.weight(format!("{name}.weight"), &[cout, cin, kernel, kernel], rng)?,
            bias: ps.zeros(format!("{name}.bias"), &[cout])?,
            stride,
            pad: kernel / 2,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = conv2d(x, &self.weight, self.stride, self.pad)?;
        let o = self.bias.dim(0)?;
        Ok(y.broadcast_add(&self.bias.reshape((1, o, 1, 1))?)?)
    }
}

pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        din: usize,
        dout: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            weight: ps.weight(format!("{name}.weight"), &[dout, din], rng)?,
            bias: ps.zeros(format!("{name}.bias"), &[dout])?,
        })
    }

    /// `x: N x din -> N x dout`
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.weight.t()?)?.broadcast_add(&self.bias)?)
    }
}

pub fn silu(x: &Tensor) -> Result<Tensor> {
    Ok(x.silu()?)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct nested-loop convolution used as the reference.
    fn naive_conv(x: &[f64], xs: [usize; 4], w: &[f64], ws: [usize; 4], stride: usize, pad: usize) -> Vec<f64> {
        let [n, c, h, wd] = xs;
        let [o, _, k, _] = ws;
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        let mut y = vec![0.0; n * o * ho * wo];
        for b in 0..n {
            for oc in 0..o {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = 0.0;
                        for ic in 0..c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                        continue;
                                    }
                                    acc += x[((b * c + ic) * h + iy as usize) * wd + ix as usize]
                                        * w[((oc * c + ic) * k + ky) * k + kx];
                                }
                            }
                        }
                        y[((b * o + oc) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        y
    }

    fn rand_vec(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = init_rng(seed);
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn forward_matches_naive_loops() {
        for (stride, k) in [(1, 3), (2, 3), (1, 1)] {
            let xs = [2, 3, 7, 6];
            let ws = [4, 3, k, k];
            let x = rand_vec(xs.iter().product(), 1);
            let w = rand_vec(ws.iter().product(), 2);
            let expect = naive_conv(&x, xs, &w, ws, stride, k / 2);
            let xt = Tensor::from_vec(x, &xs, &Device::Cpu).unwrap();
            let wt = Tensor::from_vec(w, &ws, &Device::Cpu).unwrap();
            let got = conv2d(&xt, &wt, stride, k / 2).unwrap();
            let got = got.flatten_all().unwrap().to_vec1::<f64>().unwrap();
            assert_eq!(got.len(), expect.len());
            for (a, b) in got.iter().zip(&expect) {
                assert!((a - b).abs() < 1e-12, "stride {stride}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let xs = [1, 2, 5, 5];
        let ws = [3, 2, 3, 3];
        let x = Var::from_tensor(&Tensor::from_vec(rand_vec(50, 3), &xs, &Device::Cpu).unwrap()).unwrap();
        let w = Var::from_tensor(&Tensor::from_vec(rand_vec(54, 4), &ws, &Device::Cpu).unwrap()).unwrap();
        let probe = Tensor::from_vec(rand_vec(3 * 3 * 3, 5), (1, 3, 3, 3), &Device::Cpu).unwrap();
        let loss = |x: &Tensor, w: &Tensor| -> f64 {
            (conv2d(x, w, 2, 1).unwrap() * &probe)
                .unwrap()
                .sum_all()
                .unwrap()
                .to_scalar::<f64>()
                .unwrap()
        };
        let y = (conv2d(x.as_tensor(), w.as_tensor(), 2, 1).unwrap() * &probe).unwrap();
        let grads = y.sum_all().unwrap().backward().unwrap();
        for var in [&x, &w] {
            let g = grads.get(var).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
            let base = var.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap();
            for i in 0..base.len() {
                let eps = 1e-6;
                let mut plus = base.clone();
                plus[i] += eps;
                let mut minus = base.clone();
                minus[i] -= eps;
                let shape = var.shape().clone();
                let mk = |v: Vec<f64>| Tensor::from_vec(v, &shape, &Device::Cpu).unwrap();
                let (lp, lm) = if std::ptr::eq(var, &x) {
                    (loss(&mk(plus), w.as_tensor()), loss(&mk(minus), w.as_tensor()))
                } else {
                    (loss(x.as_tensor(), &mk(plus)), loss(x.as_tensor(), &mk(minus)))
                };
                let fd = (lp - lm) / (2.0 * eps);
                assert!((fd - g[i]).abs() < 1e-7, "index {i}: fd {fd} vs analytic {}", g[i]);
            }
        }
    }

    #[test]
    fn param_store_copy_and_ema() {
        let mut rng = init_rng(0);
        let mut a = ParamStore::new(DType::F64, &Device::Cpu);
        let mut b = ParamStore::new(DType::F64, &Device::Cpu);
        a.weight("w".into(), &[2, 3], &mut rng).unwrap();
        b.zeros("w".into(), &[2, 3]).unwrap();
        assert_ne!(a.digest().unwrap(), b.digest().unwrap());
        b.copy_from(&a).unwrap();
        assert_eq!(a.digest().unwrap(), b.digest().unwrap());

        let mut c = ParamStore::new(DType::F64, &Device::Cpu);
        c.zeros("w".into(), &[3, 2]).unwrap();
        assert!(matches!(c.ema_from(&a, 0.5), Err(Error::Shape(_))));
    }
}
