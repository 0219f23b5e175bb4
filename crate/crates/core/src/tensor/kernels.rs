//! Low-level kernels shared by the tape: strided GEMM and im2col/col2im.

/// Strided view of a row-major matrix operand.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [f32],
    pub rs: usize,
    pub cs: usize,
}

impl<'a> MatRef<'a> {
    pub fn rows(data: &'a [f32], cols: usize) -> Self {
        MatRef {
            data,
            rs: cols,
            cs: 1,
        }
    }

    /// Transposed view of a row-major matrix with `cols` columns.
    pub fn transposed(data: &'a [f32], cols: usize) -> Self {
        MatRef {
            data,
            rs: 1,
            cs: cols,
        }
    }
}

/// `c = a · b + beta · c` for an `m×k` by `k×n` product; `c` is row-major `m×n`.
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: MatRef, b: MatRef, beta: f32, c: &mut [f32]) {
    assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k > 0 {
        assert!(a.data.len() > (m - 1) * a.rs + (k - 1) * a.cs);
        assert!(b.data.len() > (k - 1) * b.rs + (n - 1) * b.cs);
    }
    // SAFETY: bounds of all three operands are asserted above for the
    // requested strides, and `c` does not alias `a` or `b` (distinct borrows).
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of one image plane convolution.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Im2col {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl Im2col {
    pub fn rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    pub fn cols(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Expand `input` (`channels×height×width`) into a `rows×cols` patch matrix.
    pub fn expand(&self, input: &[f32], col: &mut [f32]) {
        let cols = self.cols();
        for c in 0..self.channels {
            let plane = &input[c * self.height * self.width..(c + 1) * self.height * self.width];
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = (c * self.kh + i) * self.kw + j;
                    let dst = &mut col[row * cols..(row + 1) * cols];
                    for oy in 0..self.out_h {
                        let y = (oy * self.stride + i) as isize - self.pad as isize;
                        let line = &mut dst[oy * self.out_w..(oy + 1) * self.out_w];
                        if y < 0 || y >= self.height as isize {
                            line.fill(0.0);
                            continue;
                        }
                        let src = &plane[y as usize * self.width..(y as usize + 1) * self.width];
                        for (ox, v) in line.iter_mut().enumerate() {
                            let x = (ox * self.stride + j) as isize - self.pad as isize;
                            *v = if x < 0 || x >= self.width as isize {
                                0.0
                            } else {
                                src[x as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of `expand`: scatter-add a patch matrix back into an image.
    pub fn fold(&self, col: &[f32], output: &mut [f32]) {
        let cols = self.cols();
        for c in 0..self.channels {
            let plane =
                &mut output[c * self.height * self.width..(c + 1) * self.height * self.width];
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = (c * self.kh + i) * self.kw + j;
                    let src = &col[row * cols..(row + 1) * cols];
                    for oy in 0..self.out_h {
                        let y = (oy * self.stride + i) as isize - self.pad as isize;
                        if y < 0 || y >= self.height as isize {
                            continue;
                        }
                        let dst =
                            &mut plane[y as usize * self.width..(y as usize + 1) * self.width];
                        for ox in 0..self.out_w {
                            let x = (ox * self.stride + j) as isize - self.pad as isize;
                            if x >= 0 && (x as usize) < self.width {
                                dst[x as usize] += src[oy * self.out_w + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}
