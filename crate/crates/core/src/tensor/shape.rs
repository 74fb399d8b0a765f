//! Shape arithmetic: row-major strides, NumPy-style broadcasting, and a
//! bounds-checked dgemm wrapper.

use crate::error::{Error, Result};

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub fn strides_for(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; shape.len()];
    let mut acc = 1;
    for (stride, &extent) in strides.iter_mut().zip(shape).rev() {
        *stride = acc;
        acc *= extent;
    }
    strides
}

/// Right-aligned broadcast of two shapes.
pub fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = dim_right(a, rank, i);
        let db = dim_right(b, rank, i);
        out[i] = if da == db {
            da
        } else if da == 1 {
            db
        } else if db == 1 {
            da
        } else {
            return Err(Error::ShapeMismatch {
                op,
                lhs: a.to_vec(),
                rhs: b.to_vec(),
            });
        };
    }
    Ok(out)
}

fn dim_right(shape: &[usize], rank: usize, i: usize) -> usize {
    let offset = rank - shape.len();
    if i < offset {
        1
    } else {
        shape[i - offset]
    }
}

/// Element strides of `shape` viewed inside a broadcast target of `rank`
/// dims; broadcast dims get stride 0.
pub fn broadcast_strides(shape: &[usize], rank: usize) -> Vec<usize> {
    let own = strides_for(shape);
    let offset = rank - shape.len();
    let mut out = vec![0; rank];
    for i in 0..rank {
        if i >= offset && shape[i - offset] != 1 {
            out[i] = own[i - offset];
        }
    }
    out
}

/// Walks every position of `out_shape`, yielding flat offsets into the
/// output and into two broadcast operands.
pub fn for_each_broadcast2(
    out_shape: &[usize],
    a_strides: &[usize],
    b_strides: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let total = numel(out_shape);
    if total == 0 {
        return;
    }
    let rank = out_shape.len();
    if rank == 0 {
        f(0, 0, 0);
        return;
    }
    let mut coords = vec![0usize; rank];
    let (mut oa, mut ob) = (0usize, 0usize);
    for out_idx in 0..total {
        f(out_idx, oa, ob);
        // increment multi-index from the innermost dim
        for d in (0..rank).rev() {
            coords[d] += 1;
            oa += a_strides[d];
            ob += b_strides[d];
            if coords[d] < out_shape[d] {
                break;
            }
            coords[d] = 0;
            oa -= out_shape[d] * a_strides[d];
            ob -= out_shape[d] * b_strides[d];
        }
    }
}

/// Decomposes `shape` around `axis` into (outer, n, inner) extents.
pub fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let n = shape[axis];
    let inner = shape[axis + 1..].iter().product();
    (outer, n, inner)
}

/// C = alpha * A(m x k) * B(k x n) + beta * C, with explicit strides.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    beta: f64,
    c: &mut [f64],
    rsc: usize,
    csc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(m.saturating_sub(1) * rsa + k.saturating_sub(1) * csa < a.len().max(1) || k == 0);
    assert!(k.saturating_sub(1) * rsb + n.saturating_sub(1) * csb < b.len().max(1) || k == 0);
    assert!(m.saturating_sub(1) * rsc + n.saturating_sub(1) * csc < c.len());
    if k == 0 {
        // dgemm with k = 0 is just the beta-scale of C.
        for i in 0..m {
            for j in 0..n {
                let idx = i * rsc + j * csc;
                c[idx] *= beta;
            }
        }
        return;
    }
    if m * n * k <= 4096 {
        // micro product: packing overhead would dominate
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a[i * rsa + p * csa] * b[p * rsb + j * csb];
                }
                let idx = i * rsc + j * csc;
                c[idx] = beta * c[idx] + alpha * s;
            }
        }
        return;
    }
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strides_row_major() {
        assert_eq!(strides_for(&[2, 3, 4]), vec![12, 4, 1]);
        assert_eq!(strides_for(&[]), Vec::<usize>::new());
    }

    #[test]
    fn broadcast_rules() {
        assert_eq!(
            broadcast_shape("t", &[2, 1, 4], &[3, 1]).unwrap(),
            vec![2, 3, 4]
        );
        assert_eq!(broadcast_shape("t", &[5], &[]).unwrap(), vec![5]);
        assert!(broadcast_shape("t", &[2, 3], &[4, 3]).is_err());
    }

    #[test]
    fn broadcast_walk_matches_manual_expansion() {
        // (2,1) + (3,) -> (2,3)
        let out = [2usize, 3];
        let sa = broadcast_strides(&[2, 1], 2);
        let sb = broadcast_strides(&[3], 2);
        let mut seen = Vec::new();
        for_each_broadcast2(&out, &sa, &sb, |o, a, b| seen.push((o, a, b)));
        assert_eq!(
            seen,
            vec![(0, 0, 0), (1, 0, 1), (2, 0, 2), (3, 1, 0), (4, 1, 1), (5, 1, 2)]
        );
    }

    #[test]
    fn gemm_small() {
        let a = [1.0, 2.0, 3.0, 4.0]; // 2x2
        let b = [5.0, 6.0, 7.0, 8.0]; // 2x2
        let mut c = [0.0; 4];
        gemm(2, 2, 2, 1.0, &a, 2, 1, &b, 2, 1, 0.0, &mut c, 2, 1);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        // transposed-B view: A * B^T
        let mut ct = [0.0; 4];
        gemm(2, 2, 2, 1.0, &a, 2, 1, &b, 1, 2, 0.0, &mut ct, 2, 1);
        assert_eq!(ct, [17.0, 23.0, 39.0, 53.0]);
    }
}
