//! Raw slice kernels. Callers validate shapes; everything here assumes
//! row-major layouts and single-sample `C×H×W` planes.

/// Border handling for same-size convolutions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    Zero,
    /// Repeat the nearest edge pixel; constant inputs stay constant.
    Replicate,
}

/// `C = alpha * op(A) * op(B) + beta * C` with `op(A)` of size `m×k` and
/// `op(B)` of size `k×n`. `a_t`/`b_t` mean the operand is stored transposed.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above guarantee every strided access stays inside
    // the slices; `c` is exclusively borrowed.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
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
        );
    }
}

/// Unfold a `C×H×W` plane into `[C·k·k, H·W]` columns for a same-size
/// convolution with odd kernel `k`.
pub fn im2col(x: &[f64], c: usize, h: usize, w: usize, k: usize, pad: Padding) -> Vec<f64> {
    let r = (k / 2) as isize;
    let hw = h * w;
    let mut cols = vec![0.0; c * k * k * hw];
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                let dy = ky as isize - r;
                let dx = kx as isize - r;
                for y in 0..h {
                    let sy = y as isize + dy;
                    let out = &mut dst[y * w..(y + 1) * w];
                    match pad {
                        Padding::Zero => {
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                            let x0 = (-dx).max(0) as usize;
                            let x1 = (w as isize - dx).min(w as isize).max(0) as usize;
                            for xo in x0..x1 {
                                out[xo] = src[(xo as isize + dx) as usize];
                            }
                        }
                        Padding::Replicate => {
                            let sy = sy.clamp(0, h as isize - 1) as usize;
                            let src = &plane[sy * w..(sy + 1) * w];
                            for (xo, o) in out.iter_mut().enumerate() {
                                let sx = (xo as isize + dx).clamp(0, w as isize - 1) as usize;
                                *o = src[sx];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add columns back into `dx`.
pub fn col2im(cols: &[f64], dx: &mut [f64], c: usize, h: usize, w: usize, k: usize, pad: Padding) {
    let r = (k / 2) as isize;
    let hw = h * w;
    for ci in 0..c {
        let plane = &mut dx[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                let dy = ky as isize - r;
                let dxo = kx as isize - r;
                for y in 0..h {
                    let sy = y as isize + dy;
                    let g = &src[y * w..(y + 1) * w];
                    match pad {
                        Padding::Zero => {
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                            let x0 = (-dxo).max(0) as usize;
                            let x1 = (w as isize - dxo).min(w as isize).max(0) as usize;
                            for xo in x0..x1 {
                                dst[(xo as isize + dxo) as usize] += g[xo];
                            }
                        }
                        Padding::Replicate => {
                            let sy = sy.clamp(0, h as isize - 1) as usize;
                            let dst = &mut plane[sy * w..(sy + 1) * w];
                            for (xo, gv) in g.iter().enumerate() {
                                let sx = (xo as isize + dxo).clamp(0, w as isize - 1) as usize;
                                dst[sx] += gv;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// 2×2 average pooling of each plane.
pub fn avg_pool2(x: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (ho, wo) = (h / 2, w / 2);
    let mut out = vec![0.0; c * ho * wo];
    for ci in 0..c {
        let src = &x[ci * h * w..];
        let dst = &mut out[ci * ho * wo..(ci + 1) * ho * wo];
        for y in 0..ho {
            for xo in 0..wo {
                let i = 2 * y * w + 2 * xo;
                dst[y * wo + xo] = 0.25 * (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]);
            }
        }
    }
    out
}

pub fn avg_pool2_backward(g: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (ho, wo) = (h / 2, w / 2);
    let mut dx = vec![0.0; c * h * w];
    for ci in 0..c {
        let src = &g[ci * ho * wo..(ci + 1) * ho * wo];
        let dst = &mut dx[ci * h * w..(ci + 1) * h * w];
        for y in 0..ho {
            for xo in 0..wo {
                let v = 0.25 * src[y * wo + xo];
                let i = 2 * y * w + 2 * xo;
                dst[i] = v;
                dst[i + 1] = v;
                dst[i + w] = v;
                dst[i + w + 1] = v;
            }
        }
    }
    dx
}

/// Nearest-neighbour 2× upsampling of each `h×w` plane.
pub fn upsample2(x: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let wo = 2 * w;
    let mut out = vec![0.0; c * 4 * h * w];
    for ci in 0..c {
        let src = &x[ci * h * w..(ci + 1) * h * w];
        let dst = &mut out[ci * 4 * h * w..(ci + 1) * 4 * h * w];
        for y in 0..2 * h {
            for xo in 0..wo {
                dst[y * wo + xo] = src[(y / 2) * w + xo / 2];
            }
        }
    }
    out
}

pub fn upsample2_backward(g: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let wo = 2 * w;
    let mut dx = vec![0.0; c * h * w];
    for ci in 0..c {
        let src = &g[ci * 4 * h * w..(ci + 1) * 4 * h * w];
        let dst = &mut dx[ci * h * w..(ci + 1) * h * w];
        for y in 0..2 * h {
            for xo in 0..wo {
                dst[(y / 2) * w + xo / 2] += src[y * wo + xo];
            }
        }
    }
    dx
}

/// Index map for space-to-depth: position `i` of the `[C·f², H/f, W/f]`
/// output reads position `map[i]` of the `[C, H, W]` input.
pub fn unshuffle_index(c: usize, h: usize, w: usize, f: usize) -> Vec<usize> {
    let (ho, wo) = (h / f, w / f);
    let mut map = Vec::with_capacity(c * h * w);
    for ci in 0..c {
        for dy in 0..f {
            for dx in 0..f {
                for y in 0..ho {
                    for x in 0..wo {
                        map.push((ci * h + y * f + dy) * w + x * f + dx);
                    }
                }
            }
        }
    }
    map
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &[f64], wt: &[f64], c: usize, co: usize, h: usize, w: usize, k: usize) -> Vec<f64> {
        let r = (k / 2) as isize;
        let mut out = vec![0.0; co * h * w];
        for o in 0..co {
            for y in 0..h {
                for xx in 0..w {
                    let mut acc = 0.0;
                    for ci in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let sy = y as isize + ky as isize - r;
                                let sx = xx as isize + kx as isize - r;
                                if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                    continue;
                                }
                                acc += wt[((o * c + ci) * k + ky) * k + kx]
                                    * x[(ci * h + sy as usize) * w + sx as usize];
                            }
                        }
                    }
                    out[(o * h + y) * w + xx] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn im2col_gemm_matches_direct_convolution() {
        let (c, co, h, w, k) = (2, 3, 4, 5, 3);
        let x: Vec<f64> = (0..c * h * w).map(|i| (i as f64 * 0.37).sin()).collect();
        let wt: Vec<f64> = (0..co * c * k * k).map(|i| (i as f64 * 0.11).cos()).collect();
        let cols = im2col(&x, c, h, w, k, Padding::Zero);
        let mut out = vec![0.0; co * h * w];
        gemm(co, c * k * k, h * w, 1.0, &wt, false, &cols, false, 0.0, &mut out);
        let want = naive_conv(&x, &wt, c, co, h, w, k);
        for (a, b) in out.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        for pad in [Padding::Zero, Padding::Replicate] {
            let (c, h, w, k) = (2, 3, 4, 3);
            let x: Vec<f64> = (0..c * h * w).map(|i| (i as f64 * 0.5).sin()).collect();
            let y: Vec<f64> = (0..c * k * k * h * w).map(|i| (i as f64 * 0.3).cos()).collect();
            let ax = im2col(&x, c, h, w, k, pad);
            let mut aty = vec![0.0; c * h * w];
            col2im(&y, &mut aty, c, h, w, k, pad);
            let lhs: f64 = ax.iter().zip(&y).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.iter().zip(&aty).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-10, "{pad:?}");
        }
    }

    #[test]
    fn transposed_gemm() {
        // A^T stored as [k, m], B^T stored as [n, k].
        let a_t = [1.0, 3.0, 2.0, 4.0]; // A = [[1,2],[3,4]]
        let b_t = [5.0, 7.0, 6.0, 8.0]; // B = [[5,6],[7,8]]
        let mut c = [0.0; 4];
        gemm(2, 2, 2, 1.0, &a_t, true, &b_t, true, 0.0, &mut c);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn unshuffle_roundtrip_is_permutation() {
        let map = unshuffle_index(2, 4, 6, 2);
        let mut seen = map.clone();
        seen.sort_unstable();
        assert_eq!(seen, (0..48).collect::<Vec<_>>());
    }
}
