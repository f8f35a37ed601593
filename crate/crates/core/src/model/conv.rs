//! Same-padded 3×3 convolution over a square grid stored as `cells × channels`
//! rows, row index `iy * side + ix`. Implemented as im2col followed by a
//! linear layer, so the weights are `9·C_in × C_out`.

use crate::error::{Error, Result};
use crate::numeric::{Real, Tensor};

/// Column layout per output cell: for `(dy, dx)` in row-major order over
/// `-1..=1`, the `C_in` input channels of the neighbor (zero outside).
pub fn im2col3x3<T: Real>(x: &Tensor<T>, side: usize) -> Result<Tensor<T>> {
    let (cells, cin) = x.dims2()?;
    if cells != side * side {
        return Err(Error::shape("im2col3x3", x.shape(), &[side * side, cin]));
    }
    let width = 9 * cin;
    let mut out = vec![T::zero(); cells * width];
    for iy in 0..side {
        for ix in 0..side {
            let row = &mut out[(iy * side + ix) * width..(iy * side + ix + 1) * width];
            for (k, (dy, dx)) in offsets().enumerate() {
                if let Some(src) = neighbor(side, iy, ix, dy, dx) {
                    row[k * cin..(k + 1) * cin].copy_from_slice(x.row(src));
                }
            }
        }
    }
    Tensor::matrix(cells, width, out)
}

/// Adjoint of [`im2col3x3`].
pub fn col2im3x3<T: Real>(dcol: &Tensor<T>, side: usize) -> Result<Tensor<T>> {
    let (cells, width) = dcol.dims2()?;
    if cells != side * side || width % 9 != 0 {
        return Err(Error::shape("col2im3x3", dcol.shape(), &[side * side, width]));
    }
    let cin = width / 9;
    let mut dx = Tensor::zeros(&[cells, cin]);
    for iy in 0..side {
        for ix in 0..side {
            let row = dcol.row(iy * side + ix);
            for (k, (dy, ddx)) in offsets().enumerate() {
                if let Some(src) = neighbor(side, iy, ix, dy, ddx) {
                    for (o, &g) in dx.row_mut(src).iter_mut().zip(&row[k * cin..(k + 1) * cin]) {
                        *o += g;
                    }
                }
            }
        }
    }
    Ok(dx)
}

fn offsets() -> impl Iterator<Item = (isize, isize)> {
    (-1..=1).flat_map(|dy| (-1..=1).map(move |dx| (dy, dx)))
}

#[inline]
fn neighbor(side: usize, iy: usize, ix: usize, dy: isize, dx: isize) -> Option<usize> {
    let y = iy as isize + dy;
    let x = ix as isize + dx;
    let s = side as isize;
    (y >= 0 && y < s && x >= 0 && x < s).then(|| (y * s + x) as usize)
}
