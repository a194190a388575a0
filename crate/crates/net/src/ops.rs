//! Tensor operations not covered (or covered too slowly) by candle on CPU.

use std::sync::Arc;

use candle_core::{bail, CpuStorage, CustomOp1, CustomOp2, DType, Layout, Result, Shape, Tensor, D};

/// Element types with a BLAS-style kernel.
trait Gemm: candle_core::WithDType + Copy + Default + std::ops::AddAssign {
    /// `c = alpha * a(m x k) * b(k x n) + beta * c`, all strided.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
    );
}

impl Gemm for f32 {
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, 1);
    }
}

impl Gemm for f64 {
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, 1);
    }
}

fn contiguous<'a, T: candle_core::WithDType>(s: &'a CpuStorage, l: &Layout, op: &str) -> Result<&'a [T]> {
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&s.as_slice::<T>()?[a..b]),
        None => bail!("{op}: input must be contiguous"),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct ConvDims {
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    co: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    ph: usize,
    pw: usize,
    ho: usize,
    wo: usize,
}

impl ConvDims {
    fn new(x: &[usize], w: &[usize], stride: usize, ph: usize, pw: usize) -> Result<Self> {
        let (&[b, c, h, wd], &[co, ci, kh, kw]) = (x, w) else {
            bail!("conv2d expects 4-d input and weight, got {x:?} and {w:?}");
        };
        if c != ci {
            bail!("conv2d channel mismatch: input {c}, weight {ci}");
        }
        if h + 2 * ph < kh || wd + 2 * pw < kw || stride == 0 {
            bail!("conv2d kernel {kh}x{kw} does not fit input {h}x{wd}");
        }
        Ok(Self {
            b,
            c,
            h,
            w: wd,
            co,
            kh,
            kw,
            stride,
            ph,
            pw,
            ho: (h + 2 * ph - kh) / stride + 1,
            wo: (wd + 2 * pw - kw) / stride + 1,
        })
    }

    fn kk(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn l(&self) -> usize {
        self.ho * self.wo
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.ph == 0 && self.pw == 0
    }
}

/// Unfolds one image `(C, H, W)` into `(C*kh*kw, Ho*Wo)`.
fn im2col<T: Gemm>(x: &[T], d: &ConvDims, cols: &mut [T]) {
    let l = d.l();
    for ci in 0..d.c {
        let plane = &x[ci * d.h * d.w..(ci + 1) * d.h * d.w];
        for ky in 0..d.kh {
            for kx in 0..d.kw {
                let row = &mut cols[((ci * d.kh + ky) * d.kw + kx) * l..][..l];
                for oy in 0..d.ho {
                    let dst = &mut row[oy * d.wo..(oy + 1) * d.wo];
                    let iy = (oy * d.stride + ky) as isize - d.ph as isize;
                    if iy < 0 || iy >= d.h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * d.w..(iy as usize + 1) * d.w];
                    for (ox, o) in dst.iter_mut().enumerate() {
                        let ix = (ox * d.stride + kx) as isize - d.pw as isize;
                        *o = if ix >= 0 && (ix as usize) < d.w {
                            src[ix as usize]
                        } else {
                            T::zero()
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns back into `(C, H, W)`.
fn col2im<T: Gemm>(cols: &[T], d: &ConvDims, x: &mut [T]) {
    let l = d.l();
    for ci in 0..d.c {
        let plane = &mut x[ci * d.h * d.w..(ci + 1) * d.h * d.w];
        for ky in 0..d.kh {
            for kx in 0..d.kw {
                let row = &cols[((ci * d.kh + ky) * d.kw + kx) * l..][..l];
                for oy in 0..d.ho {
                    let iy = (oy * d.stride + ky) as isize - d.ph as isize;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * d.w..(iy as usize + 1) * d.w];
                    for (ox, &g) in row[oy * d.wo..(oy + 1) * d.wo].iter().enumerate() {
                        let ix = (ox * d.stride + kx) as isize - d.pw as isize;
                        if ix >= 0 && (ix as usize) < d.w {
                            dst[ix as usize] += g;
                        }
                    }
                }
            }
        }
    }
}

fn conv_fwd<T: Gemm>(x: &[T], w: &[T], d: &ConvDims) -> Vec<T> {
    let (kk, l) = (d.kk(), d.l());
    let mut y = vec![T::zero(); d.b * d.co * l];
    let mut cols = if d.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); kk * l]
    };
    for b in 0..d.b {
        let xb = &x[b * d.c * d.h * d.w..(b + 1) * d.c * d.h * d.w];
        let src = if d.is_pointwise() {
            xb
        } else {
            im2col(xb, d, &mut cols);
            &cols
        };
        unsafe {
            T::gemm(
                d.co,
                kk,
                l,
                w.as_ptr(),
                kk as isize,
                1,
                src.as_ptr(),
                l as isize,
                1,
                T::zero(),
                y.as_mut_ptr().add(b * d.co * l),
                l as isize,
            );
        }
    }
    y
}

fn conv_grad_input<T: Gemm>(gy: &[T], w: &[T], d: &ConvDims) -> Vec<T> {
    let (kk, l) = (d.kk(), d.l());
    let img = d.c * d.h * d.w;
    let mut gx = vec![T::zero(); d.b * img];
    let mut gcols = vec![T::zero(); kk * l];
    for b in 0..d.b {
        let dst: *mut T = if d.is_pointwise() {
            unsafe { gx.as_mut_ptr().add(b * img) }
        } else {
            gcols.as_mut_ptr()
        };
        // gcols = W^T (kk x co) * gy_b (co x l)
        unsafe {
            T::gemm(
                kk,
                d.co,
                l,
                w.as_ptr(),
                1,
                kk as isize,
                gy.as_ptr().add(b * d.co * l),
                l as isize,
                1,
                T::zero(),
                dst,
                l as isize,
            );
        }
        if !d.is_pointwise() {
            col2im(&gcols, d, &mut gx[b * img..(b + 1) * img]);
        }
    }
    gx
}

fn conv_grad_weight<T: Gemm>(x: &[T], gy: &[T], d: &ConvDims) -> Vec<T> {
    let (kk, l) = (d.kk(), d.l());
    let mut gw = vec![T::zero(); d.co * kk];
    let mut cols = if d.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); kk * l]
    };
    for b in 0..d.b {
        let xb = &x[b * d.c * d.h * d.w..(b + 1) * d.c * d.h * d.w];
        let src = if d.is_pointwise() {
            xb
        } else {
            im2col(xb, d, &mut cols);
            &cols
        };
        // gw += gy_b (co x l) * cols^T (l x kk)
        unsafe {
            T::gemm(
                d.co,
                l,
                kk,
                gy.as_ptr().add(b * d.co * l),
                l as isize,
                1,
                src.as_ptr(),
                1,
                l as isize,
                T::one(),
                gw.as_mut_ptr(),
                kk as isize,
            );
        }
    }
    gw
}

macro_rules! dispatch1 {
    ($s:expr, $l:expr, $name:expr, |$a:ident| $body:expr) => {
        match $s {
            CpuStorage::F32(_) => {
                let $a = contiguous::<f32>($s, $l, $name)?;
                CpuStorage::F32($body)
            }
            CpuStorage::F64(_) => {
                let $a = contiguous::<f64>($s, $l, $name)?;
                CpuStorage::F64($body)
            }
            _ => bail!("{}: only f32/f64 inputs are supported", $name),
        }
    };
}

macro_rules! dispatch2 {
    ($s1:expr, $l1:expr, $s2:expr, $l2:expr, $name:expr, |$a:ident, $b:ident| $body:expr) => {
        match ($s1, $s2) {
            (CpuStorage::F32(_), CpuStorage::F32(_)) => {
                let $a = contiguous::<f32>($s1, $l1, $name)?;
                let $b = contiguous::<f32>($s2, $l2, $name)?;
                CpuStorage::F32($body)
            }
            (CpuStorage::F64(_), CpuStorage::F64(_)) => {
                let $a = contiguous::<f64>($s1, $l1, $name)?;
                let $b = contiguous::<f64>($s2, $l2, $name)?;
                CpuStorage::F64($body)
            }
            _ => bail!("{}: only f32/f64 inputs of matching dtype are supported", $name),
        }
    };
}

#[derive(Debug, Clone, Copy)]
struct Conv2dOp {
    stride: usize,
    ph: usize,
    pw: usize,
}

impl CustomOp2 for Conv2dOp {
    fn name(&self) -> &'static str {
        "ralf-conv2d"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> Result<(CpuStorage, Shape)> {
        let d = ConvDims::new(l1.dims(), l2.dims(), self.stride, self.ph, self.pw)?;
        let out = dispatch2!(s1, l1, s2, l2, "conv2d", |x, w| conv_fwd(x, w, &d));
        Ok((out, Shape::from((d.b, d.co, d.ho, d.wo))))
    }

    fn bwd(&self, x: &Tensor, w: &Tensor, _res: &Tensor, grad: &Tensor) -> Result<(Option<Tensor>, Option<Tensor>)> {
        let d = ConvDims::new(x.dims(), w.dims(), self.stride, self.ph, self.pw)?;
        let grad = grad.contiguous()?;
        let gx = grad.apply_op2_no_bwd(w, &ConvGradInput { d })?;
        let gw = x.apply_op2_no_bwd(&grad, &ConvGradWeight { d })?;
        Ok((Some(gx), Some(gw)))
    }
}

struct ConvGradInput {
    d: ConvDims,
}

impl CustomOp2 for ConvGradInput {
    fn name(&self) -> &'static str {
        "ralf-conv2d-grad-input"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> Result<(CpuStorage, Shape)> {
        let d = self.d;
        let out = dispatch2!(s1, l1, s2, l2, "conv2d-grad-input", |gy, w| conv_grad_input(gy, w, &d));
        Ok((out, Shape::from((d.b, d.c, d.h, d.w))))
    }
}

struct ConvGradWeight {
    d: ConvDims,
}

impl CustomOp2 for ConvGradWeight {
    fn name(&self) -> &'static str {
        "ralf-conv2d-grad-weight"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> Result<(CpuStorage, Shape)> {
        let d = self.d;
        let out = dispatch2!(s1, l1, s2, l2, "conv2d-grad-weight", |x, gy| conv_grad_weight(
            x, gy, &d
        ));
        Ok((out, Shape::from((d.co, d.c, d.kh, d.kw))))
    }
}

/// 2-d convolution, `x: (B, C, H, W)`, `w: (Co, C, kh, kw)`, zero padding.
pub fn conv2d(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, stride: usize, pad: (usize, usize)) -> Result<Tensor> {
    let y = x.contiguous()?.apply_op2(
        &w.contiguous()?,
        Conv2dOp {
            stride,
            ph: pad.0,
            pw: pad.1,
        },
    )?;
    match bias {
        Some(b) => bias_add(&y, b),
        None => Ok(y),
    }
}

struct BiasAdd;

impl CustomOp2 for BiasAdd {
    fn name(&self) -> &'static str {
        "ralf-bias-add"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> Result<(CpuStorage, Shape)> {
        let &[_, c, h, w] = l1.dims() else {
            bail!("bias add expects a 4-d input, got {:?}", l1.dims());
        };
        if l2.dims() != [c] {
            bail!("bias of shape {:?} for {c} channels", l2.dims());
        }
        let plane = h * w;
        let out = dispatch2!(s1, l1, s2, l2, "bias-add", |y, b| y
            .chunks(plane)
            .enumerate()
            .flat_map(|(i, row)| {
                let v = b[i % c];
                row.iter().map(move |&e| e + v)
            })
            .collect());
        Ok((out, l1.shape().clone()))
    }

    fn bwd(&self, _y: &Tensor, _b: &Tensor, _res: &Tensor, grad: &Tensor) -> Result<(Option<Tensor>, Option<Tensor>)> {
        let gb = grad.contiguous()?.apply_op1_no_bwd(&ChannelSum)?;
        Ok((Some(grad.clone()), Some(gb)))
    }
}

struct ChannelSum;

impl CustomOp1 for ChannelSum {
    fn name(&self) -> &'static str {
        "ralf-channel-sum"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> Result<(CpuStorage, Shape)> {
        let &[_, c, h, w] = l.dims() else {
            bail!("channel sum expects a 4-d input, got {:?}", l.dims());
        };
        fn run<T: Gemm>(g: &[T], c: usize, plane: usize) -> Vec<T> {
            let mut acc = vec![0.0f64; c];
            for (i, row) in g.chunks(plane).enumerate() {
                acc[i % c] += row.iter().map(|v| v.to_f64()).sum::<f64>();
            }
            acc.into_iter().map(T::from_f64).collect()
        }
        let out = dispatch1!(s, l, "channel-sum", |g| run(g, c, h * w));
        Ok((out, Shape::from(c)))
    }
}

/// Adds a per-channel bias to `(B, C, H, W)`.
pub fn bias_add(y: &Tensor, b: &Tensor) -> Result<Tensor> {
    y.contiguous()?.apply_op2(&b.contiguous()?, BiasAdd)
}

/// Normalizes every `(sample, channel)` plane over its spatial extent.
pub fn instance_norm(x: &Tensor, eps: f64) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    x.contiguous()?.apply_op1(InstanceNorm { plane: h * w, eps })
}

#[derive(Debug, Clone, Copy)]
struct InstanceNorm {
    plane: usize,
    eps: f64,
}

impl InstanceNorm {
    /// Mean and reciprocal standard deviation of one plane.
    fn stats<T: Gemm>(&self, x: &[T]) -> (f64, f64) {
        let n = x.len() as f64;
        let mean = x.iter().map(|v| v.to_f64()).sum::<f64>() / n;
        let var = x.iter().map(|v| (v.to_f64() - mean).powi(2)).sum::<f64>() / n;
        (mean, 1.0 / (var + self.eps).sqrt())
    }

    fn forward<T: Gemm>(&self, x: &[T]) -> Vec<T> {
        let mut out = Vec::with_capacity(x.len());
        for p in x.chunks(self.plane) {
            let (mean, rstd) = self.stats(p);
            out.extend(p.iter().map(|v| T::from_f64((v.to_f64() - mean) * rstd)));
        }
        out
    }

    fn backward<T: Gemm>(&self, x: &[T], g: &[T]) -> Vec<T> {
        let mut out = Vec::with_capacity(x.len());
        for (p, gp) in x.chunks(self.plane).zip(g.chunks(self.plane)) {
            let (mean, rstd) = self.stats(p);
            let n = p.len() as f64;
            let (mut sg, mut sgy) = (0.0, 0.0);
            for (xv, gv) in p.iter().zip(gp) {
                let y = (xv.to_f64() - mean) * rstd;
                sg += gv.to_f64();
                sgy += gv.to_f64() * y;
            }
            let (mg, mgy) = (sg / n, sgy / n);
            out.extend(p.iter().zip(gp).map(|(xv, gv)| {
                let y = (xv.to_f64() - mean) * rstd;
                T::from_f64(rstd * (gv.to_f64() - mg - y * mgy))
            }));
        }
        out
    }
}

impl CustomOp1 for InstanceNorm {
    fn name(&self) -> &'static str {
        "ralf-instance-norm"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> Result<(CpuStorage, Shape)> {
        let out = dispatch1!(s, l, "instance-norm", |x| self.forward(x));
        Ok((out, l.shape().clone()))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> Result<Option<Tensor>> {
        let g = arg.apply_op2_no_bwd(&grad.contiguous()?, &InstanceNormGrad(*self))?;
        Ok(Some(g))
    }
}

struct InstanceNormGrad(InstanceNorm);

impl CustomOp2 for InstanceNormGrad {
    fn name(&self) -> &'static str {
        "ralf-instance-norm-grad"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> Result<(CpuStorage, Shape)> {
        let out = dispatch2!(s1, l1, s2, l2, "instance-norm-grad", |x, g| self.0.backward(x, g));
        Ok((out, l1.shape().clone()))
    }
}

/// Rectified linear unit with a single-pass backward.
pub fn relu(x: &Tensor) -> Result<Tensor> {
    x.contiguous()?.apply_op1(Relu)
}

struct Relu;

impl CustomOp1 for Relu {
    fn name(&self) -> &'static str {
        "ralf-relu"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> Result<(CpuStorage, Shape)> {
        let out = dispatch1!(s, l, "relu", |x| x
            .iter()
            .map(|&v| if v > Default::default() { v } else { Default::default() })
            .collect());
        Ok((out, l.shape().clone()))
    }

    fn bwd(&self, _arg: &Tensor, res: &Tensor, grad: &Tensor) -> Result<Option<Tensor>> {
        Ok(Some(res.apply_op2_no_bwd(&grad.contiguous()?, &ReluGrad)?))
    }
}

struct ReluGrad;

impl CustomOp2 for ReluGrad {
    fn name(&self) -> &'static str {
        "ralf-relu-grad"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> Result<(CpuStorage, Shape)> {
        let out = dispatch2!(s1, l1, s2, l2, "relu-grad", |y, g| y
            .iter()
            .zip(g)
            .map(|(&y, &g)| if y > Default::default() { g } else { Default::default() })
            .collect());
        Ok((out, l1.shape().clone()))
    }
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    x.contiguous()?.apply_op1(Sigmoid)
}

struct Sigmoid;

impl CustomOp1 for Sigmoid {
    fn name(&self) -> &'static str {
        "ralf-sigmoid"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> Result<(CpuStorage, Shape)> {
        fn run<T: Gemm>(x: &[T]) -> Vec<T> {
            x.iter()
                .map(|v| T::from_f64(1.0 / (1.0 + (-v.to_f64()).exp())))
                .collect()
        }
        let out = dispatch1!(s, l, "sigmoid", |x| run(x));
        Ok((out, l.shape().clone()))
    }

    fn bwd(&self, _arg: &Tensor, res: &Tensor, grad: &Tensor) -> Result<Option<Tensor>> {
        Ok(Some(res.apply_op2_no_bwd(&grad.contiguous()?, &SigmoidGrad)?))
    }
}

struct SigmoidGrad;

impl CustomOp2 for SigmoidGrad {
    fn name(&self) -> &'static str {
        "ralf-sigmoid-grad"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> Result<(CpuStorage, Shape)> {
        fn run<T: Gemm>(y: &[T], g: &[T]) -> Vec<T> {
            y.iter()
                .zip(g)
                .map(|(y, g)| {
                    let y = y.to_f64();
                    T::from_f64(g.to_f64() * y * (1.0 - y))
                })
                .collect()
        }
        let out = dispatch2!(s1, l1, s2, l2, "sigmoid-grad", |y, g| run(y, g));
        Ok((out, l1.shape().clone()))
    }
}

/// Row-wise L2 normalization of `(B, K)`.
pub fn l2_normalize(x: &Tensor) -> Result<Tensor> {
    let norm = (x.sqr()?.sum_keepdim(D::Minus1)? + 1e-12)?.sqrt()?;
    x.broadcast_div(&norm)
}

/// Linear interpolation weights from `n` cell centers to `n * scale` pixel centers.
/// Outside the outermost cell centers the nearest pair is extrapolated, so affine
/// fields are reproduced exactly everywhere.
pub fn upsample_matrix(n: usize, scale: usize) -> Vec<f64> {
    let big = n * scale;
    let mut m = vec![0.0; big * n];
    for r in 0..big {
        if n == 1 {
            m[r] = 1.0;
            continue;
        }
        let pos = (r as f64 + 0.5) / scale as f64 - 0.5;
        let i0 = (pos.floor() as isize).clamp(0, n as isize - 2) as usize;
        let t = pos - i0 as f64;
        m[r * n + i0] = 1.0 - t;
        m[r * n + i0 + 1] = t;
    }
    m
}

/// Upsamples a `(B, 2, h, w)` flow field by `scale`, multiplying values by `scale`.
pub fn upsample_flow(flow: &Tensor, scale: usize) -> Result<Tensor> {
    let (b, c, h, w) = flow.dims4()?;
    let (dev, dt) = (flow.device(), flow.dtype());
    let uh = Tensor::from_vec(upsample_matrix(h, scale), (h * scale, h), dev)?.to_dtype(dt)?;
    let uwt = Tensor::from_vec(upsample_matrix(w, scale), (w * scale, w), dev)?
        .to_dtype(dt)?
        .t()?;
    // (B*C*h, w) x (w, W)
    let rows = flow.reshape((b * c * h, w))?.matmul(&uwt)?;
    let rows = rows.reshape((b * c, h, w * scale))?;
    let uh = uh.unsqueeze(0)?.broadcast_as((b * c, h * scale, h))?.contiguous()?;
    (uh.matmul(&rows)? * scale as f64)?.reshape((b, c, h * scale, w * scale))
}

/// Bilinear lookup in one correlation level around per-query coordinates.
///
/// Input `(B*H*W, hl, wl)`; output `(B, (2r+1)^2, H, W)`. Channel
/// `(dy + r) * (2r + 1) + (dx + r)` samples the level at
/// `(row / 2^level + dy, col / 2^level + dx)`, zero outside.
#[derive(Debug, Clone)]
struct CorrLookup {
    coords: Arc<Vec<f64>>,
    b: usize,
    h: usize,
    w: usize,
    hl: usize,
    wl: usize,
    scale: f64,
    radius: usize,
}

impl CorrLookup {
    /// Visits every (query, tap, corner) with its bilinear weight.
    fn for_each(&self, mut f: impl FnMut(usize, usize, usize, f64)) {
        let side = 2 * self.radius + 1;
        let r = self.radius as isize;
        let hw = self.h * self.w;
        for q in 0..self.b * hw {
            let cy = self.coords[2 * q] / self.scale;
            let cx = self.coords[2 * q + 1] / self.scale;
            let (y0, x0) = (cy.floor(), cx.floor());
            let (fy, fx) = (cy - y0, cx - x0);
            let (y0, x0) = (y0 as isize, x0 as isize);
            for dy in -r..=r {
                for dx in -r..=r {
                    let tap = ((dy + r) as usize) * side + (dx + r) as usize;
                    for (oy, wy) in [(0isize, 1.0 - fy), (1, fy)] {
                        let yy = y0 + dy + oy;
                        if yy < 0 || yy >= self.hl as isize || wy == 0.0 {
                            continue;
                        }
                        for (ox, wx) in [(0isize, 1.0 - fx), (1, fx)] {
                            let xx = x0 + dx + ox;
                            if xx < 0 || xx >= self.wl as isize || wx == 0.0 {
                                continue;
                            }
                            f(q, tap, yy as usize * self.wl + xx as usize, wy * wx);
                        }
                    }
                }
            }
        }
    }

    fn taps(&self) -> usize {
        (2 * self.radius + 1).pow(2)
    }

    fn lookup<T: Gemm>(&self, corr: &[T]) -> Vec<T> {
        let (hw, k, plane) = (self.h * self.w, self.taps(), self.hl * self.wl);
        let mut out = vec![T::zero(); self.b * k * hw];
        self.for_each(|q, tap, idx, wgt| {
            let (bi, p) = (q / hw, q % hw);
            out[(bi * k + tap) * hw + p] += T::from_f64(wgt * corr[q * plane + idx].to_f64());
        });
        out
    }

    fn scatter<T: Gemm>(&self, grad: &[T]) -> Vec<T> {
        let (hw, k, plane) = (self.h * self.w, self.taps(), self.hl * self.wl);
        let mut out = vec![T::zero(); self.b * hw * plane];
        self.for_each(|q, tap, idx, wgt| {
            let (bi, p) = (q / hw, q % hw);
            out[q * plane + idx] += T::from_f64(wgt * grad[(bi * k + tap) * hw + p].to_f64());
        });
        out
    }
}

impl CustomOp1 for CorrLookup {
    fn name(&self) -> &'static str {
        "ralf-corr-lookup"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> Result<(CpuStorage, Shape)> {
        if l.shape().elem_count() != self.b * self.h * self.w * self.hl * self.wl {
            bail!("corr lookup: level has shape {:?}", l.dims());
        }
        let out = dispatch1!(s, l, "corr-lookup", |c| self.lookup(c));
        Ok((out, Shape::from((self.b, self.taps(), self.h, self.w))))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> Result<Option<Tensor>> {
        let g = grad.contiguous()?.apply_op1_no_bwd(&CorrScatter(self.clone()))?;
        Ok(Some(g))
    }
}

struct CorrScatter(CorrLookup);

impl CustomOp1 for CorrScatter {
    fn name(&self) -> &'static str {
        "ralf-corr-scatter"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> Result<(CpuStorage, Shape)> {
        let c = &self.0;
        let out = dispatch1!(s, l, "corr-scatter", |g| c.scatter(g));
        Ok((out, Shape::from((c.b * c.h * c.w, c.hl, c.wl))))
    }
}

/// Samples `level` (`(B*H*W, hl, wl)`) around `coords` (row, col pairs in level-0 cells,
/// `B*H*W*2` values). Gradients flow into the level only.
pub fn corr_lookup(
    level: &Tensor,
    coords: Arc<Vec<f64>>,
    grid: (usize, usize, usize),
    level_index: usize,
    radius: usize,
) -> Result<Tensor> {
    let (_, hl, wl) = level.dims3()?;
    let (b, h, w) = grid;
    if coords.len() != b * h * w * 2 {
        bail!("corr lookup: {} coordinates for a {b}x{h}x{w} grid", coords.len());
    }
    level.contiguous()?.apply_op1(CorrLookup {
        coords,
        b,
        h,
        w,
        hl,
        wl,
        scale: (1usize << level_index) as f64,
        radius,
    })
}

pub(crate) fn check_float(dtype: DType) -> Result<()> {
    match dtype {
        DType::F32 | DType::F64 => Ok(()),
        other => bail!("unsupported dtype {other:?}"),
    }
}
