//! Raw row-major kernels shared by the tape and by inference.

/// Below this fraction of surviving weights the masked linear kernels iterate
/// over surviving entries only instead of running a dense GEMM.
pub(crate) const SPARSE_DENSITY_THRESHOLD: f64 = 0.25;

/// `c = op(a) · op(b) + beta · c` with `op(a)` of shape m×k and `op(b)` of
/// shape k×n. A transposed operand is stored in its untransposed layout.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths were checked above and the strides address
    // exactly those buffers.
    unsafe {
        matrixmultiply::dgemm(
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
        );
    }
}

pub(crate) fn transpose(src: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    const TILE: usize = 32;
    for r0 in (0..rows).step_by(TILE) {
        for c0 in (0..cols).step_by(TILE) {
            for r in r0..(r0 + TILE).min(rows) {
                for c in c0..(c0 + TILE).min(cols) {
                    out[c * rows + r] = src[r * cols + c];
                }
            }
        }
    }
    out
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    // four accumulators keep the loop vectorizable without reassociation
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        for l in 0..4 {
            acc[l] += a[4 * c + l] * b[4 * c + l];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// Surviving entries of an out×in mask in compressed-row form.
struct Pattern {
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
}

impl Pattern {
    fn from_mask(mask: &[bool], out: usize, inp: usize) -> Self {
        let mut row_ptr = Vec::with_capacity(out + 1);
        let mut cols = Vec::new();
        row_ptr.push(0);
        for j in 0..out {
            for (i, &keep) in mask[j * inp..(j + 1) * inp].iter().enumerate() {
                if keep {
                    cols.push(i);
                }
            }
            row_ptr.push(cols.len());
        }
        Pattern { row_ptr, cols }
    }
}

fn density(mask: &[bool]) -> f64 {
    if mask.is_empty() {
        return 1.0;
    }
    mask.iter().filter(|&&m| m).count() as f64 / mask.len() as f64
}

fn effective_weight(weight: &[f64], mask: &[bool]) -> Vec<f64> {
    weight
        .iter()
        .zip(mask)
        .map(|(&w, &m)| if m { w } else { 0.0 })
        .collect()
}

/// `y = x · (weight ⊙ mask)ᵀ + bias` for `x` of shape batch×inp and
/// `weight` of shape out×inp. Returns batch×out.
pub(crate) fn masked_linear_forward(
    x: &[f64],
    batch: usize,
    inp: usize,
    weight: &[f64],
    mask: &[bool],
    bias: &[f64],
    out: usize,
) -> Vec<f64> {
    let mut y = vec![0.0; batch * out];
    for row in y.chunks_exact_mut(out) {
        row.copy_from_slice(bias);
    }
    if density(mask) < SPARSE_DENSITY_THRESHOLD {
        let pattern = Pattern::from_mask(mask, out, inp);
        let xt = transpose(x, batch, inp);
        let mut yt = transpose(&y, batch, out);
        for j in 0..out {
            let yj = &mut yt[j * batch..(j + 1) * batch];
            for p in pattern.row_ptr[j]..pattern.row_ptr[j + 1] {
                let i = pattern.cols[p];
                axpy(weight[j * inp + i], &xt[i * batch..(i + 1) * batch], yj);
            }
        }
        transpose(&yt, out, batch)
    } else {
        let we = effective_weight(weight, mask);
        gemm(batch, inp, out, x, false, &we, true, 1.0, &mut y);
        y
    }
}

pub(crate) struct LinearGrads {
    pub dx: Vec<f64>,
    pub dweight: Vec<f64>,
    pub dbias: Vec<f64>,
}

/// Gradients of [`masked_linear_forward`]. `dweight` is exactly zero at
/// masked positions.
#[allow(clippy::too_many_arguments)]
pub(crate) fn masked_linear_backward(
    x: &[f64],
    batch: usize,
    inp: usize,
    weight: &[f64],
    mask: &[bool],
    out: usize,
    dy: &[f64],
    need_dx: bool,
) -> LinearGrads {
    let mut dbias = vec![0.0; out];
    for row in dy.chunks_exact(out) {
        for (b, g) in dbias.iter_mut().zip(row) {
            *b += g;
        }
    }
    if density(mask) < SPARSE_DENSITY_THRESHOLD {
        let pattern = Pattern::from_mask(mask, out, inp);
        let xt = transpose(x, batch, inp);
        let dyt = transpose(dy, batch, out);
        let mut dweight = vec![0.0; out * inp];
        let mut dxt = if need_dx { vec![0.0; inp * batch] } else { Vec::new() };
        for j in 0..out {
            let gj = &dyt[j * batch..(j + 1) * batch];
            for p in pattern.row_ptr[j]..pattern.row_ptr[j + 1] {
                let i = pattern.cols[p];
                dweight[j * inp + i] = dot(gj, &xt[i * batch..(i + 1) * batch]);
                if need_dx {
                    axpy(weight[j * inp + i], gj, &mut dxt[i * batch..(i + 1) * batch]);
                }
            }
        }
        let dx = if need_dx {
            transpose(&dxt, inp, batch)
        } else {
            Vec::new()
        };
        LinearGrads { dx, dweight, dbias }
    } else {
        let mut dweight = vec![0.0; out * inp];
        gemm(out, batch, inp, dy, true, x, false, 0.0, &mut dweight);
        for (g, &m) in dweight.iter_mut().zip(mask) {
            if !m {
                *g = 0.0;
            }
        }
        let dx = if need_dx {
            let we = effective_weight(weight, mask);
            let mut dx = vec![0.0; batch * inp];
            gemm(batch, out, inp, dy, false, &we, false, 0.0, &mut dx);
            dx
        } else {
            Vec::new()
        };
        LinearGrads { dx, dweight, dbias }
    }
}
