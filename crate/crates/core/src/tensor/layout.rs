//! Broadcast iteration: coalesced dimensions plus per-operand strides.

use crate::error::{Error, Result};

/// Trailing-aligned broadcast of two shapes.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for (i, o) in out.iter_mut().enumerate() {
        let da = dim_from_right(a, rank - 1 - i);
        let db = dim_from_right(b, rank - 1 - i);
        *o = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::shape(
                    "broadcast",
                    format!("{a:?} and {b:?} are not broadcastable"),
                ))
            }
        };
    }
    Ok(out)
}

/// Whether `from` broadcasts to exactly `to`.
pub(crate) fn broadcasts_to(from: &[usize], to: &[usize]) -> bool {
    from.len() <= to.len()
        && (0..from.len()).all(|i| {
            let f = dim_from_right(from, i);
            f == 1 || f == dim_from_right(to, i)
        })
}

fn dim_from_right(shape: &[usize], i: usize) -> usize {
    if i < shape.len() {
        shape[shape.len() - 1 - i]
    } else {
        1
    }
}

pub(crate) fn contiguous_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; shape.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        strides[i] = acc;
        acc *= shape[i];
    }
    strides
}

/// Iteration space over `out` with every operand's strides, after dropping
/// unit dimensions and merging dimensions contiguous in every operand.
#[derive(Debug, Clone)]
pub(crate) struct Layout {
    dims: Vec<usize>,
    strides: Vec<Vec<usize>>,
}

impl Layout {
    /// Operands must broadcast to `out` (checked by the caller).
    pub(crate) fn new(out: &[usize], operands: &[&[usize]]) -> Self {
        let rank = out.len();
        let full: Vec<Vec<usize>> = operands
            .iter()
            .map(|shape| {
                let natural = contiguous_strides(shape);
                (0..rank)
                    .map(|j| {
                        let lead = rank - shape.len();
                        if j < lead || shape[j - lead] == 1 {
                            0
                        } else {
                            natural[j - lead]
                        }
                    })
                    .collect()
            })
            .collect();

        let mut dims: Vec<usize> = Vec::new();
        let mut strides: Vec<Vec<usize>> = vec![Vec::new(); operands.len()];
        for j in 0..rank {
            if out[j] == 1 {
                continue;
            }
            let mergeable = !dims.is_empty()
                && full.iter().enumerate().all(|(k, st)| {
                    let last = *strides[k].last().unwrap();
                    last == st[j] * out[j]
                });
            if mergeable {
                *dims.last_mut().unwrap() *= out[j];
                for (k, st) in full.iter().enumerate() {
                    *strides[k].last_mut().unwrap() = st[j];
                }
            } else {
                dims.push(out[j]);
                for (k, st) in full.iter().enumerate() {
                    strides[k].push(st[j]);
                }
            }
        }
        if dims.is_empty() {
            dims.push(1);
            for s in strides.iter_mut() {
                s.push(0);
            }
        }
        Self { dims, strides }
    }

    pub(crate) fn numel(&self) -> usize {
        self.dims.iter().product()
    }

    pub(crate) fn inner(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub(crate) fn inner_stride(&self, operand: usize) -> usize {
        *self.strides[operand].last().unwrap()
    }

    /// Calls `f(out_offset, operand_bases)` for every innermost row.
    pub(crate) fn for_each_row(&self, mut f: impl FnMut(usize, &[usize])) {
        if self.numel() == 0 {
            return;
        }
        let outer = &self.dims[..self.dims.len() - 1];
        let inner = self.inner();
        let k = self.strides.len();
        let mut idx = vec![0usize; outer.len()];
        let mut bases = vec![0usize; k];
        let rows: usize = outer.iter().product();
        for row in 0..rows {
            f(row * inner, &bases);
            // odometer increment over the outer dims
            let mut d = outer.len();
            while d > 0 {
                d -= 1;
                idx[d] += 1;
                for (b, st) in bases.iter_mut().zip(&self.strides) {
                    *b += st[d];
                }
                if idx[d] < outer[d] {
                    break;
                }
                for (b, st) in bases.iter_mut().zip(&self.strides) {
                    *b -= st[d] * outer[d];
                }
                idx[d] = 0;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn offsets(out: &[usize], operand: &[usize]) -> Vec<usize> {
        let l = Layout::new(out, &[operand]);
        let s = l.inner_stride(0);
        let mut v = Vec::new();
        l.for_each_row(|_, b| {
            for j in 0..l.inner() {
                v.push(b[0] + j * s);
            }
        });
        v
    }

    #[test]
    fn broadcast_shape_rules() {
        assert_eq!(broadcast_shape(&[2, 3], &[3]).unwrap(), vec![2, 3]);
        assert_eq!(broadcast_shape(&[2, 1], &[1, 4]).unwrap(), vec![2, 4]);
        assert_eq!(broadcast_shape(&[], &[5]).unwrap(), vec![5]);
        assert!(broadcast_shape(&[2, 3], &[2]).is_err());
    }

    #[test]
    fn coalesces_contiguous_operands() {
        let l = Layout::new(&[4, 5, 6], &[&[4, 5, 6], &[4, 5, 6]]);
        assert_eq!(l.dims, vec![120]);
    }

    #[test]
    fn offsets_match_index_arithmetic() {
        assert_eq!(offsets(&[2, 3], &[3]), vec![0, 1, 2, 0, 1, 2]);
        assert_eq!(offsets(&[2, 3], &[2, 1]), vec![0, 0, 0, 1, 1, 1]);
        assert_eq!(offsets(&[2, 2, 2], &[2, 1, 2]), vec![0, 1, 0, 1, 2, 3, 2, 3]);
        assert_eq!(offsets(&[3], &[]), vec![0, 0, 0]);
        assert_eq!(offsets(&[], &[]), vec![0]);
    }
}
