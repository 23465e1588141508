//! Raw numeric kernels shared by the forward and backward passes.
//!
//! All buffers are row-major slices. Accumulating kernels add into `out`.

use crate::tensor::Real;

/// `c[m×n] += a[m×k] · b[k×n]`
pub fn gemm_nn<F: Real>(m: usize, k: usize, n: usize, a: &[F], b: &[F], c: &mut [F]) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv = *cv + av * bv;
            }
        }
    }
}

/// `c[m×n] += a[m×k] · b[n×k]ᵀ`
pub fn gemm_nt<F: Real>(m: usize, k: usize, n: usize, a: &[F], b: &[F], c: &mut [F]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = F::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                acc = acc + x * y;
            }
            c[i * n + j] = c[i * n + j] + acc;
        }
    }
}

/// `c[m×n] += a[k×m]ᵀ · b[k×n]`
pub fn gemm_tn<F: Real>(m: usize, k: usize, n: usize, a: &[F], b: &[F], c: &mut [F]) {
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv = *cv + av * bv;
            }
        }
    }
}

/// Geometry of a same-size, stride-1 convolution.
#[derive(Clone, Copy, Debug)]
pub struct ConvGeom {
    pub n: usize,
    pub ci: usize,
    pub co: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
}

impl ConvGeom {
    fn pad(&self) -> isize {
        (self.k / 2) as isize
    }

    fn plane(&self) -> usize {
        self.h * self.w
    }

    fn cols_rows(&self) -> usize {
        self.ci * self.k * self.k
    }
}

/// Unfolds one image (ci×h×w) into a (ci·k·k)×(h·w) patch matrix with zero padding.
fn im2col<F: Real>(g: &ConvGeom, x: &[F], cols: &mut [F]) {
    let (h, w, k) = (g.h as isize, g.w as isize, g.k as isize);
    let pad = g.pad();
    let plane = g.plane();
    for c in 0..g.ci {
        let src = &x[c * plane..(c + 1) * plane];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * g.k * g.k) + (ky * k + kx) as usize;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                let dy = ky - pad;
                let dx = kx - pad;
                for y in 0..h {
                    let sy = y + dy;
                    let drow = &mut dst[(y * w) as usize..((y + 1) * w) as usize];
                    if sy < 0 || sy >= h {
                        drow.fill(F::zero());
                        continue;
                    }
                    for x in 0..w {
                        let sx = x + dx;
                        drow[x as usize] = if sx < 0 || sx >= w {
                            F::zero()
                        } else {
                            src[(sy * w + sx) as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Folds a patch-matrix gradient back onto the image gradient (adjoint of [`im2col`]).
fn col2im<F: Real>(g: &ConvGeom, cols: &[F], dx_img: &mut [F]) {
    let (h, w, k) = (g.h as isize, g.w as isize, g.k as isize);
    let pad = g.pad();
    let plane = g.plane();
    for c in 0..g.ci {
        let dst = &mut dx_img[c * plane..(c + 1) * plane];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * g.k * g.k) + (ky * k + kx) as usize;
                let src = &cols[row * plane..(row + 1) * plane];
                let dy = ky - pad;
                let dxo = kx - pad;
                for y in 0..h {
                    let sy = y + dy;
                    if sy < 0 || sy >= h {
                        continue;
                    }
                    for x in 0..w {
                        let sx = x + dxo;
                        if sx >= 0 && sx < w {
                            let d = &mut dst[(sy * w + sx) as usize];
                            *d = *d + src[(y * w + x) as usize];
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<F: Real>(g: &ConvGeom, x: &[F], wt: &[F], bias: Option<&[F]>) -> Vec<F> {
    let plane = g.plane();
    let mut out = vec![F::zero(); g.n * g.co * plane];
    let mut cols = if g.k == 1 { Vec::new() } else { vec![F::zero(); g.cols_rows() * plane] };
    for n in 0..g.n {
        let xin = &x[n * g.ci * plane..(n + 1) * g.ci * plane];
        let o = &mut out[n * g.co * plane..(n + 1) * g.co * plane];
        if let Some(b) = bias {
            for (c, &bv) in b.iter().enumerate() {
                o[c * plane..(c + 1) * plane].fill(bv);
            }
        }
        let cm: &[F] = if g.k == 1 {
            xin
        } else {
            im2col(g, xin, &mut cols);
            &cols
        };
        gemm_nn(g.co, g.cols_rows(), plane, wt, cm, o);
    }
    out
}

/// Accumulates input, weight and bias gradients of a convolution.
pub fn conv2d_backward<F: Real>(
    g: &ConvGeom,
    x: &[F],
    wt: &[F],
    dout: &[F],
    dx: Option<&mut [F]>,
    dw: Option<&mut [F]>,
    db: Option<&mut [F]>,
) {
    let plane = g.plane();
    if let Some(db) = db {
        for n in 0..g.n {
            for (c, d) in db.iter_mut().enumerate() {
                let off = (n * g.co + c) * plane;
                *d = *d + dout[off..off + plane].iter().copied().sum::<F>();
            }
        }
    }
    let mut cols = if g.k == 1 { Vec::new() } else { vec![F::zero(); g.cols_rows() * plane] };
    if let Some(dw) = dw {
        for n in 0..g.n {
            let xin = &x[n * g.ci * plane..(n + 1) * g.ci * plane];
            let dn = &dout[n * g.co * plane..(n + 1) * g.co * plane];
            let cm: &[F] = if g.k == 1 {
                xin
            } else {
                im2col(g, xin, &mut cols);
                &cols
            };
            gemm_nt(g.co, plane, g.cols_rows(), dn, cm, dw);
        }
    }
    if let Some(dx) = dx {
        let mut dcols = vec![F::zero(); g.cols_rows() * plane];
        for n in 0..g.n {
            let dn = &dout[n * g.co * plane..(n + 1) * g.co * plane];
            let dxn = &mut dx[n * g.ci * plane..(n + 1) * g.ci * plane];
            if g.k == 1 {
                gemm_tn(g.ci, g.co, plane, wt, dn, dxn);
            } else {
                dcols.fill(F::zero());
                gemm_tn(g.cols_rows(), g.co, plane, wt, dn, &mut dcols);
                col2im(g, &dcols, dxn);
            }
        }
    }
}

/// Index map for space-to-depth: `out[i] = in[map[i]]` for an input of
/// shape (n, c, h, w) and block factor `f`.
pub fn space_to_depth_map(n: usize, c: usize, h: usize, w: usize, f: usize) -> Vec<usize> {
    let (ho, wo) = (h / f, w / f);
    let mut map = Vec::with_capacity(n * c * h * w);
    for b in 0..n {
        for ch in 0..c {
            for dy in 0..f {
                for dx in 0..f {
                    for y in 0..ho {
                        for x in 0..wo {
                            map.push(((b * c + ch) * h + y * f + dy) * w + x * f + dx);
                        }
                    }
                }
            }
        }
    }
    map
}

/// Bilinear sampling with border clamping. `coords` is (n, 2, ho, wo) with
/// channel 0 the column (x) and channel 1 the row (y), in source pixels.
pub struct BilinearGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub ho: usize,
    pub wo: usize,
}

struct Tap<F> {
    i00: usize,
    i01: usize,
    i10: usize,
    i11: usize,
    ax: F,
    ay: F,
    /// Whether the coordinate was inside the clamp range (gradient passes).
    live_x: bool,
    live_y: bool,
}

fn tap<F: Real>(h: usize, w: usize, xc: F, yc: F) -> Tap<F> {
    let xmax = F::lit((w - 1) as f64);
    let ymax = F::lit((h - 1) as f64);
    let live_x = xc >= F::zero() && xc <= xmax;
    let live_y = yc >= F::zero() && yc <= ymax;
    let x = xc.max(F::zero()).min(xmax);
    let y = yc.max(F::zero()).min(ymax);
    let x0 = x.floor().to_usize().unwrap_or(0).min(w - 1);
    let y0 = y.floor().to_usize().unwrap_or(0).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    Tap {
        i00: y0 * w + x0,
        i01: y0 * w + x1,
        i10: y1 * w + x0,
        i11: y1 * w + x1,
        ax: x - F::lit(x0 as f64),
        ay: y - F::lit(y0 as f64),
        live_x,
        live_y,
    }
}

pub fn bilinear_forward<F: Real>(g: &BilinearGeom, src: &[F], coords: &[F]) -> Vec<F> {
    let plane_in = g.h * g.w;
    let plane_out = g.ho * g.wo;
    let mut out = vec![F::zero(); g.n * g.c * plane_out];
    let one = F::one();
    for n in 0..g.n {
        let cx = &coords[(n * 2) * plane_out..(n * 2 + 1) * plane_out];
        let cy = &coords[(n * 2 + 1) * plane_out..(n * 2 + 2) * plane_out];
        for p in 0..plane_out {
            let t = tap(g.h, g.w, cx[p], cy[p]);
            for c in 0..g.c {
                let s = &src[(n * g.c + c) * plane_in..(n * g.c + c + 1) * plane_in];
                let top = s[t.i00] * (one - t.ax) + s[t.i01] * t.ax;
                let bot = s[t.i10] * (one - t.ax) + s[t.i11] * t.ax;
                out[(n * g.c + c) * plane_out + p] = top * (one - t.ay) + bot * t.ay;
            }
        }
    }
    out
}

pub fn bilinear_backward<F: Real>(
    g: &BilinearGeom,
    src: &[F],
    coords: &[F],
    dout: &[F],
    mut dsrc: Option<&mut [F]>,
    mut dcoords: Option<&mut [F]>,
) {
    let plane_in = g.h * g.w;
    let plane_out = g.ho * g.wo;
    let one = F::one();
    for n in 0..g.n {
        let cx = &coords[(n * 2) * plane_out..(n * 2 + 1) * plane_out];
        let cy = &coords[(n * 2 + 1) * plane_out..(n * 2 + 2) * plane_out];
        for p in 0..plane_out {
            let t = tap(g.h, g.w, cx[p], cy[p]);
            let mut gx = F::zero();
            let mut gy = F::zero();
            for c in 0..g.c {
                let base = (n * g.c + c) * plane_in;
                let go = dout[(n * g.c + c) * plane_out + p];
                if let Some(ds) = dsrc.as_deref_mut() {
                    let w00 = (one - t.ax) * (one - t.ay);
                    let w01 = t.ax * (one - t.ay);
                    let w10 = (one - t.ax) * t.ay;
                    let w11 = t.ax * t.ay;
                    ds[base + t.i00] = ds[base + t.i00] + go * w00;
                    ds[base + t.i01] = ds[base + t.i01] + go * w01;
                    ds[base + t.i10] = ds[base + t.i10] + go * w10;
                    ds[base + t.i11] = ds[base + t.i11] + go * w11;
                }
                let s = &src[base..base + plane_in];
                gx = gx
                    + go * ((one - t.ay) * (s[t.i01] - s[t.i00]) + t.ay * (s[t.i11] - s[t.i10]));
                gy = gy
                    + go * ((one - t.ax) * (s[t.i10] - s[t.i00]) + t.ax * (s[t.i11] - s[t.i01]));
            }
            if let Some(dc) = dcoords.as_deref_mut() {
                if t.live_x {
                    let i = (n * 2) * plane_out + p;
                    dc[i] = dc[i] + gx;
                }
                if t.live_y {
                    let i = (n * 2 + 1) * plane_out + p;
                    dc[i] = dc[i] + gy;
                }
            }
        }
    }
}

/// Per-row top-k selection. Ties resolve to the lowest column index.
/// Returns the selected column indices, `k` per row, in descending value order.
pub fn topk_rows<F: Real>(x: &[F], cols: usize, k: usize) -> Vec<usize> {
    let rows = if cols == 0 { 0 } else { x.len() / cols };
    let mut sel = Vec::with_capacity(rows * k);
    let mut order: Vec<usize> = Vec::with_capacity(cols);
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        order.clear();
        order.extend(0..cols);
        order.sort_by(|&a, &b| {
            row[b].partial_cmp(&row[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
        });
        sel.extend_from_slice(&order[..k]);
    }
    sel
}
