//! 2D/3D convolutions and transposed convolutions over channel-first tensors.
//!
//! 2D inputs `[C, H, W]` are handled as 3D inputs with a unit leading spatial
//! axis, so a single set of kernels serves both ranks. Kernels unfold blocks
//! of output rows into an im2col matrix and hand the products to a GEMM.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{join, DiffOp, Module, Param};
use crate::tensor::Tensor;

/// Kernel geometry along the three spatial axes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
}

impl ConvGeom {
    /// "Same"-padded square kernel of odd size `k` on `rank` spatial axes.
    pub fn square(rank: usize, k: usize, stride: usize) -> Self {
        let (kz, sz, pz) = if rank == 2 { (1, 1, 0) } else { (k, stride, k / 2) };
        Self {
            kernel: [kz, k, k],
            stride: [sz, stride, stride],
            pad: [pz, k / 2, k / 2],
        }
    }

    pub fn kernel_volume(&self) -> usize {
        self.kernel.iter().product()
    }

    fn output_dims(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        let mut out = [0; 3];
        for a in 0..3 {
            let span = input[a] + 2 * self.pad[a];
            if span < self.kernel[a] {
                return Err(Error::InvalidShape(format!(
                    "spatial extent {} too small for kernel {}",
                    input[a], self.kernel[a]
                )));
            }
            out[a] = (span - self.kernel[a]) / self.stride[a] + 1;
        }
        Ok(out)
    }
}

/// Index bookkeeping shared by the three kernels. "Input" and "output"
/// refer to the forward direction of an ordinary convolution.
#[derive(Clone, Copy, Debug)]
struct Plan {
    cin: usize,
    cout: usize,
    groups: usize,
    idims: [usize; 3],
    odims: [usize; 3],
    geom: ConvGeom,
}

impl Plan {
    fn cin_g(&self) -> usize {
        self.cin / self.groups
    }

    fn cout_g(&self) -> usize {
        self.cout / self.groups
    }

    fn ivol(&self) -> usize {
        self.idims.iter().product()
    }

    fn ovol(&self) -> usize {
        self.odims.iter().product()
    }

    /// Valid `[lo, hi)` output range along the last axis for kernel tap `k`.
    #[inline]
    fn x_range(&self, k: usize) -> (usize, usize) {
        let s = self.geom.stride[2];
        let p = self.geom.pad[2];
        let n_in = self.idims[2];
        let lo = if p > k { (p - k).div_ceil(s) } else { 0 };
        // ix = ox*s + k - p <= n_in - 1
        let hi = if n_in + p > k {
            ((n_in - 1 + p - k) / s + 1).min(self.odims[2])
        } else {
            0
        };
        (lo, hi.max(lo))
    }

    #[inline]
    fn in_index(&self, o: usize, k: usize, axis: usize) -> Option<usize> {
        let i = (o * self.geom.stride[axis] + k) as isize - self.geom.pad[axis] as isize;
        (i >= 0 && (i as usize) < self.idims[axis]).then_some(i as usize)
    }

    /// Output rows (along the last axis) per im2col block.
    fn rows_per_block(&self) -> usize {
        let per_row = self.cin_g() * self.geom.kernel_volume() * self.odims[2];
        (COL_BLOCK / per_row.max(1)).clamp(1, self.odims[0] * self.odims[1])
    }

    /// Copies the receptive fields of output rows `[r0, r1)` of group `g`
    /// into `col`, one matrix row per `(channel, tap)`, zero outside the input.
    fn im2col(&self, x: &[f64], g: usize, r0: usize, r1: usize, col: &mut [f64]) {
        self.for_each_patch(g, r0, r1, col.len(), |src, dst, n, stride| match src {
            Some(i) if stride == 1 => col[dst..dst + n].copy_from_slice(&x[i..i + n]),
            Some(i) => {
                for (t, c) in col[dst..dst + n].iter_mut().enumerate() {
                    *c = x[i + t * stride];
                }
            }
            None => col[dst..dst + n].fill(0.0),
        });
    }

    /// Adjoint of [`Plan::im2col`]: accumulates `col` back into `dx`.
    fn col2im(&self, col: &[f64], g: usize, r0: usize, r1: usize, dx: &mut [f64]) {
        self.for_each_patch(g, r0, r1, col.len(), |src, dst, n, stride| {
            match src {
                Some(i) if stride == 1 => {
                    for (d, c) in dx[i..i + n].iter_mut().zip(&col[dst..dst + n]) {
                        *d += c;
                    }
                }
                Some(i) => {
                    for (t, c) in col[dst..dst + n].iter().enumerate() {
                        dx[i + t * stride] += c;
                    }
                }
                None => {}
            }
        });
    }

    /// Walks the im2col layout, calling `f(src, dst, n, stride)` for each run
    /// of `n` entries starting at `col[dst]`; `src` is the first input index
    /// (advancing by `stride`) or `None` for padding.
    fn for_each_patch(
        &self,
        g: usize,
        r0: usize,
        r1: usize,
        len: usize,
        mut f: impl FnMut(Option<usize>, usize, usize, usize),
    ) {
        let [k0, k1, k2] = self.geom.kernel;
        let (s, p) = (self.geom.stride[2], self.geom.pad[2]);
        let ox = self.odims[2];
        let width = (r1 - r0) * ox;
        debug_assert_eq!(len, self.cin_g() * self.geom.kernel_volume() * width);
        let mut dst = 0;
        for cil in 0..self.cin_g() {
            let ci = g * self.cin_g() + cil;
            for kz in 0..k0 {
                for ky in 0..k1 {
                    for kx in 0..k2 {
                        let (lo, hi) = self.x_range(kx);
                        for r in r0..r1 {
                            let (oz, oy) = (r / self.odims[1], r % self.odims[1]);
                            let rows = self.in_index(oz, kz, 0).zip(self.in_index(oy, ky, 1));
                            match rows {
                                Some((iz, iy)) if hi > lo => {
                                    let irow = ((ci * self.idims[0] + iz) * self.idims[1] + iy) * self.idims[2];
                                    f(None, dst, lo, 0);
                                    f(Some(irow + lo * s + kx - p), dst + lo, hi - lo, s);
                                    f(None, dst + hi, ox - hi, 0);
                                }
                                _ => f(None, dst, ox, 0),
                            }
                            dst += ox;
                        }
                    }
                }
            }
        }
    }

    /// Runs `f(g, r0, r1, col)` over all groups and row blocks with a scratch
    /// buffer sized for the block.
    fn blocks(&self, mut f: impl FnMut(usize, usize, usize, &mut [f64])) {
        let rows = self.odims[0] * self.odims[1];
        let step = self.rows_per_block();
        let k = self.cin_g() * self.geom.kernel_volume();
        let mut col = vec![0.0; k * step * self.odims[2]];
        for g in 0..self.groups {
            let mut r0 = 0;
            while r0 < rows {
                let r1 = (r0 + step).min(rows);
                f(g, r0, r1, &mut col[..k * (r1 - r0) * self.odims[2]]);
                r0 = r1;
            }
        }
    }

    /// `y[co, o] += Σ w · x[ci, o*s + k - p]`
    fn gather(&self, x: &[f64], w: &[f64], y: &mut [f64]) {
        let (m, k, ovol) = (self.cout_g(), self.cin_g() * self.geom.kernel_volume(), self.ovol());
        self.blocks(|g, r0, r1, col| {
            self.im2col(x, g, r0, r1, col);
            let n = (r1 - r0) * self.odims[2];
            let c = &mut y[g * m * ovol + r0 * self.odims[2]..];
            gemm(m, k, n, (&w[g * m * k..], k, 1), (col, n, 1), (c, ovol), 1.0);
        });
    }

    /// Adjoint of [`Plan::gather`] with respect to `x`.
    fn scatter(&self, dy: &[f64], w: &[f64], dx: &mut [f64]) {
        let (m, k, ovol) = (self.cout_g(), self.cin_g() * self.geom.kernel_volume(), self.ovol());
        self.blocks(|g, r0, r1, col| {
            let n = (r1 - r0) * self.odims[2];
            let b = &dy[g * m * ovol + r0 * self.odims[2]..];
            gemm(k, m, n, (&w[g * m * k..], 1, k), (b, ovol, 1), (col, n), 0.0);
            self.col2im(col, g, r0, r1, dx);
        });
    }

    /// `dw[co, ci, k] += Σ_o dy[co, o] · x[ci, o*s + k - p]`
    fn weight_grad(&self, x: &[f64], dy: &[f64], dw: &mut [f64]) {
        let (m, k, ovol) = (self.cout_g(), self.cin_g() * self.geom.kernel_volume(), self.ovol());
        self.blocks(|g, r0, r1, col| {
            self.im2col(x, g, r0, r1, col);
            let n = (r1 - r0) * self.odims[2];
            let a = &dy[g * m * ovol + r0 * self.odims[2]..];
            gemm(m, n, k, (a, ovol, 1), (col, 1, n), (&mut dw[g * m * k..], k), 1.0);
        });
    }
}

/// Scratch size of one im2col block, in elements.
const COL_BLOCK: usize = 1 << 14;

/// `c[m×n] = beta·c + a[m×k] · b[k×n]` on strided row-major views given as
/// `(slice, row_stride, col_stride)`; `c` has unit column stride.
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: (&[f64], usize, usize),
    b: (&[f64], usize, usize),
    c: (&mut [f64], usize),
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    let span = |rows: usize, cols: usize, rs: usize, cs: usize| (rows - 1) * rs + (cols - 1) * cs + 1;
    if k > 0 {
        assert!(a.0.len() >= span(m, k, a.1, a.2) && b.0.len() >= span(k, n, b.1, b.2));
    }
    assert!(c.0.len() >= span(m, n, c.1, 1));
    // the micro-kernel tiles are taller than wide, so a narrow product runs
    // faster as its transpose
    let (m, n, a, b, crs, ccs) = if m < n {
        (n, m, (b.0, b.2, b.1), (a.0, a.2, a.1), 1, c.1)
    } else {
        (m, n, a, b, c.1, 1)
    };
    // SAFETY: the assertions above keep every strided access inside the slices,
    // and `c` is exclusively borrowed so it cannot alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.0.as_ptr(),
            a.1 as isize,
            a.2 as isize,
            b.0.as_ptr(),
            b.1 as isize,
            b.2 as isize,
            beta,
            c.0.as_mut_ptr(),
            crs as isize,
            ccs as isize,
        );
    }
}

/// Splits a channel-first tensor into `(channels, [d, h, w])`.
fn spatial_of(x: &Tensor, rank: usize) -> Result<(usize, [usize; 3])> {
    let s = x.shape();
    match (rank, s.len()) {
        (2, 3) => Ok((s[0], [1, s[1], s[2]])),
        (3, 4) => Ok((s[0], [s[1], s[2], s[3]])),
        _ => Err(Error::InvalidShape(format!(
            "expected a channel-first {rank}D tensor, got shape {s:?}"
        ))),
    }
}

fn shape_of(channels: usize, dims: [usize; 3], rank: usize) -> Vec<usize> {
    if rank == 2 {
        vec![channels, dims[1], dims[2]]
    } else {
        vec![channels, dims[0], dims[1], dims[2]]
    }
}

fn add_bias(y: &mut [f64], bias: &[f64]) {
    let per = y.len() / bias.len().max(1);
    for (chunk, b) in y.chunks_mut(per).zip(bias) {
        chunk.iter_mut().for_each(|v| *v += b);
    }
}

fn bias_grad(dy: &[f64], db: &mut [f64]) {
    let per = dy.len() / db.len().max(1);
    for (chunk, d) in dy.chunks(per).zip(db.iter_mut()) {
        *d += chunk.iter().sum::<f64>();
    }
}

fn uniform_fill<R: Rng>(t: &mut Tensor, bound: f64, rng: &mut R) {
    for v in t.data_mut() {
        *v = rng.random_range(-bound..=bound);
    }
}

#[derive(Clone, Debug)]
pub struct Conv {
    pub in_ch: usize,
    pub out_ch: usize,
    pub groups: usize,
    /// Number of spatial axes (2 or 3).
    pub rank: usize,
    pub geom: ConvGeom,
    /// `[out_ch, in_ch / groups, kz, ky, kx]`
    pub weight: Param,
    pub bias: Option<Param>,
}

impl Conv {
    pub fn new<R: Rng>(
        rank: usize,
        in_ch: usize,
        out_ch: usize,
        geom: ConvGeom,
        groups: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if !(rank == 2 || rank == 3) {
            return Err(Error::InvalidArgument(format!("unsupported spatial rank {rank}")));
        }
        if groups == 0 || in_ch % groups != 0 || out_ch % groups != 0 {
            return Err(Error::InvalidArgument(format!(
                "channels {in_ch}->{out_ch} not divisible into {groups} groups"
            )));
        }
        let [kz, ky, kx] = geom.kernel;
        let fan_in = (in_ch / groups) * geom.kernel_volume();
        let bound = 1.0 / libm::sqrt(fan_in as f64);
        let mut weight = Tensor::zeros(&[out_ch, in_ch / groups, kz, ky, kx]);
        uniform_fill(&mut weight, bound, rng);
        let bias = bias.then(|| {
            let mut b = Tensor::zeros(&[out_ch]);
            uniform_fill(&mut b, bound, rng);
            Param::new(b)
        });
        Ok(Self {
            in_ch,
            out_ch,
            groups,
            rank,
            geom,
            weight: Param::new(weight),
            bias,
        })
    }

    /// Dense "same" convolution with odd square kernel `k`.
    pub fn same<R: Rng>(rank: usize, in_ch: usize, out_ch: usize, k: usize, rng: &mut R) -> Result<Self> {
        Self::new(rank, in_ch, out_ch, ConvGeom::square(rank, k, 1), 1, true, rng)
    }

    /// Stride-2 3×3(×3) downsampling convolution.
    pub fn down<R: Rng>(rank: usize, in_ch: usize, out_ch: usize, rng: &mut R) -> Result<Self> {
        Self::new(rank, in_ch, out_ch, ConvGeom::square(rank, 3, 2), 1, true, rng)
    }

    /// Depthwise 3×3(×3) convolution.
    pub fn depthwise<R: Rng>(rank: usize, channels: usize, rng: &mut R) -> Result<Self> {
        Self::new(rank, channels, channels, ConvGeom::square(rank, 3, 1), channels, true, rng)
    }

    fn plan(&self, x: &Tensor) -> Result<Plan> {
        let (c, idims) = spatial_of(x, self.rank)?;
        if c != self.in_ch {
            return Err(Error::mismatch("conv input channels", &[self.in_ch], &[c]));
        }
        Ok(Plan {
            cin: self.in_ch,
            cout: self.out_ch,
            groups: self.groups,
            idims,
            odims: self.geom.output_dims(idims)?,
            geom: self.geom,
        })
    }

    /// Multiply-accumulate count of one forward pass on `x`.
    pub fn macs(&self, input_shape: &[usize]) -> Result<u64> {
        let plan = self.plan(&Tensor::zeros(input_shape))?;
        Ok((plan.ovol() * self.out_ch * plan.cin_g() * self.geom.kernel_volume()) as u64)
    }

    /// Gradient with respect to the input only, leaving parameter gradients
    /// untouched (for frozen layers).
    pub fn input_grad(&self, x: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
        let plan = self.plan(x)?;
        grad_out.ensure_shape(&shape_of(self.out_ch, plan.odims, self.rank), "conv backward")?;
        let mut dx = vec![0.0; x.len()];
        plan.scatter(grad_out.data(), self.weight.value.data(), &mut dx);
        Tensor::new(x.shape(), dx)
    }
}

impl DiffOp for Conv {
    type Cache = Tensor;

    fn forward(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let plan = self.plan(x)?;
        let mut y = vec![0.0; self.out_ch * plan.ovol()];
        if let Some(b) = &self.bias {
            add_bias(&mut y, b.value.data());
        }
        plan.gather(x.data(), self.weight.value.data(), &mut y);
        Ok((Tensor::new(&shape_of(self.out_ch, plan.odims, self.rank), y)?, x.clone()))
    }

    fn backward(&mut self, x: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
        let plan = self.plan(x)?;
        grad_out.ensure_shape(&shape_of(self.out_ch, plan.odims, self.rank), "conv backward")?;
        if let Some(b) = &mut self.bias {
            bias_grad(grad_out.data(), b.grad.data_mut());
        }
        plan.weight_grad(x.data(), grad_out.data(), self.weight.grad.data_mut());
        let mut dx = vec![0.0; x.len()];
        plan.scatter(grad_out.data(), self.weight.value.data(), &mut dx);
        Tensor::new(x.shape(), dx)
    }
}

impl Module for Conv {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(&join(prefix, "bias"), b);
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), b);
        }
    }
}

/// Stride-2 transposed convolution (kernel 3, padding 1, output padding 1),
/// doubling every spatial extent.
#[derive(Clone, Debug)]
pub struct ConvTranspose {
    pub in_ch: usize,
    pub out_ch: usize,
    pub rank: usize,
    pub geom: ConvGeom,
    pub output_pad: [usize; 3],
    /// `[in_ch, out_ch, kz, ky, kx]`
    pub weight: Param,
    pub bias: Param,
}

impl ConvTranspose {
    pub fn up<R: Rng>(rank: usize, in_ch: usize, out_ch: usize, rng: &mut R) -> Result<Self> {
        if !(rank == 2 || rank == 3) {
            return Err(Error::InvalidArgument(format!("unsupported spatial rank {rank}")));
        }
        let geom = ConvGeom::square(rank, 3, 2);
        let output_pad = if rank == 2 { [0, 1, 1] } else { [1, 1, 1] };
        let [kz, ky, kx] = geom.kernel;
        let bound = 1.0 / libm::sqrt((out_ch * geom.kernel_volume()) as f64);
        let mut weight = Tensor::zeros(&[in_ch, out_ch, kz, ky, kx]);
        uniform_fill(&mut weight, bound, rng);
        let mut bias = Tensor::zeros(&[out_ch]);
        uniform_fill(&mut bias, bound, rng);
        Ok(Self {
            in_ch,
            out_ch,
            rank,
            geom,
            output_pad,
            weight: Param::new(weight),
            bias: Param::new(bias),
        })
    }

    fn plan(&self, x: &Tensor) -> Result<Plan> {
        let (c, idims) = spatial_of(x, self.rank)?;
        if c != self.in_ch {
            return Err(Error::mismatch("transposed conv input channels", &[self.in_ch], &[c]));
        }
        let mut odims = [0; 3];
        for a in 0..3 {
            odims[a] = (idims[a] - 1) * self.geom.stride[a] + self.geom.kernel[a] + self.output_pad[a]
                - 2 * self.geom.pad[a];
        }
        // the equivalent ordinary convolution maps `odims` back onto `idims`
        Ok(Plan {
            cin: self.out_ch,
            cout: self.in_ch,
            groups: 1,
            idims: odims,
            odims: idims,
            geom: self.geom,
        })
    }
}

impl DiffOp for ConvTranspose {
    type Cache = Tensor;

    fn forward(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let plan = self.plan(x)?;
        let mut y = vec![0.0; self.out_ch * plan.ivol()];
        add_bias(&mut y, self.bias.value.data());
        plan.scatter(x.data(), self.weight.value.data(), &mut y);
        Ok((Tensor::new(&shape_of(self.out_ch, plan.idims, self.rank), y)?, x.clone()))
    }

    fn backward(&mut self, x: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
        let plan = self.plan(x)?;
        grad_out.ensure_shape(&shape_of(self.out_ch, plan.idims, self.rank), "transposed conv backward")?;
        bias_grad(grad_out.data(), self.bias.grad.data_mut());
        plan.weight_grad(grad_out.data(), x.data(), self.weight.grad.data_mut());
        let mut dx = vec![0.0; x.len()];
        plan.gather(grad_out.data(), self.weight.value.data(), &mut dx);
        Tensor::new(x.shape(), dx)
    }
}

impl Module for ConvTranspose {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct definition of a grouped, strided, zero-padded convolution.
    fn naive_conv(conv: &Conv, x: &Tensor) -> Tensor {
        let (cin, idims) = spatial_of(x, conv.rank).unwrap();
        let od = conv.geom.output_dims(idims).unwrap();
        let [k0, k1, k2] = conv.geom.kernel;
        let cin_g = cin / conv.groups;
        let cout_g = conv.out_ch / conv.groups;
        let w = conv.weight.value.data();
        let mut y = vec![0.0; conv.out_ch * od.iter().product::<usize>()];
        for co in 0..conv.out_ch {
            for oz in 0..od[0] {
                for oy in 0..od[1] {
                    for ox in 0..od[2] {
                        let mut acc = conv.bias.as_ref().map_or(0.0, |b| b.value.data()[co]);
                        for cil in 0..cin_g {
                            let ci = (co / cout_g) * cin_g + cil;
                            for kz in 0..k0 {
                                for ky in 0..k1 {
                                    for kx in 0..k2 {
                                        let iz = (oz * conv.geom.stride[0] + kz) as isize - conv.geom.pad[0] as isize;
                                        let iy = (oy * conv.geom.stride[1] + ky) as isize - conv.geom.pad[1] as isize;
                                        let ix = (ox * conv.geom.stride[2] + kx) as isize - conv.geom.pad[2] as isize;
                                        if iz < 0 || iy < 0 || ix < 0 {
                                            continue;
                                        }
                                        let (iz, iy, ix) = (iz as usize, iy as usize, ix as usize);
                                        if iz >= idims[0] || iy >= idims[1] || ix >= idims[2] {
                                            continue;
                                        }
                                        let xv = x.data()[((ci * idims[0] + iz) * idims[1] + iy) * idims[2] + ix];
                                        let wv = w[(((co * cin_g + cil) * k0 + kz) * k1 + ky) * k2 + kx];
                                        acc += xv * wv;
                                    }
                                }
                            }
                        }
                        y[((co * od[0] + oz) * od[1] + oy) * od[2] + ox] = acc;
                    }
                }
            }
        }
        Tensor::new(&shape_of(conv.out_ch, od, conv.rank), y).unwrap()
    }

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn matches_naive_definition() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cases: [(usize, usize, usize, ConvGeom, usize, Vec<usize>); 5] = [
            (2, 3, 4, ConvGeom::square(2, 3, 1), 1, vec![3, 5, 7]),
            (2, 2, 3, ConvGeom::square(2, 3, 2), 1, vec![2, 6, 8]),
            (3, 4, 4, ConvGeom::square(3, 3, 1), 4, vec![4, 3, 4, 5]),
            (3, 2, 3, ConvGeom::square(3, 3, 2), 1, vec![2, 4, 4, 6]),
            // spans several im2col blocks
            (3, 2, 3, ConvGeom::square(3, 3, 1), 1, vec![2, 8, 16, 32]),
        ];
        for (rank, cin, cout, geom, groups, shape) in cases {
            let conv = Conv::new(rank, cin, cout, geom, groups, true, &mut rng).unwrap();
            let x = random(&shape, &mut rng);
            let (y, _) = conv.forward(&x).unwrap();
            let expect = naive_conv(&conv, &x);
            assert_eq!(y.shape(), expect.shape());
            for (a, b) in y.data().iter().zip(expect.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn transposed_conv_is_adjoint_of_strided_conv() {
        // <T x, y> == <x, C y> when both share weights and biases are zero
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for rank in [2, 3] {
            let mut t = ConvTranspose::up(rank, 3, 2, &mut rng).unwrap();
            t.bias.value.fill(0.0);
            let mut c = Conv::down(rank, 2, 3, &mut rng).unwrap();
            c.weight.value = t.weight.value.clone();
            c.bias = None;
            let small = if rank == 2 { vec![3, 3, 4] } else { vec![3, 2, 3, 4] };
            let x = random(&small, &mut rng);
            let (tx, _) = t.forward(&x).unwrap();
            let y = random(tx.shape(), &mut rng);
            let (cy, _) = c.forward(&y).unwrap();
            assert_eq!(cy.shape(), x.shape());
            let lhs = tx.dot(&y).unwrap();
            let rhs = x.dot(&cy).unwrap();
            assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0));
        }
    }

    #[test]
    fn transposed_conv_doubles_extents() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = ConvTranspose::up(3, 2, 5, &mut rng).unwrap();
        let (y, _) = t.forward(&Tensor::zeros(&[2, 2, 4, 3])).unwrap();
        assert_eq!(y.shape(), &[5, 4, 8, 6]);
    }

    #[test]
    fn channel_mismatch_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let conv = Conv::same(2, 3, 4, 3, &mut rng).unwrap();
        assert!(conv.forward(&Tensor::zeros(&[2, 4, 4])).is_err());
        assert!(conv.forward(&Tensor::zeros(&[3, 4, 4, 4])).is_err());
    }
}
