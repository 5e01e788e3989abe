//! Non-overlapping 3-D convolution expressed as unfold + one matrix product.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{arg_err, dim_err, Result};
use crate::graph::{Graph, Var, ZERO_ROW};

/// Geometry of a patchified `[T, H, W, C]` volume. Trailing edges are
/// zero-padded up to a multiple of the kernel.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGeometry {
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub padded: [usize; 3],
    pub output: [usize; 3],
}

impl PatchGeometry {
    pub fn new(input: [usize; 3], kernel: [usize; 3]) -> Result<Self> {
        if input.contains(&0) {
            return Err(arg_err!("empty volume {input:?}"));
        }
        if kernel.contains(&0) {
            return Err(arg_err!("zero kernel extent {kernel:?}"));
        }
        let output = [0, 1, 2].map(|a| input[a].div_ceil(kernel[a]));
        let padded = [0, 1, 2].map(|a| output[a] * kernel[a]);
        Ok(Self {
            input,
            kernel,
            padded,
            output,
        })
    }

    pub fn patches(&self) -> usize {
        self.output.iter().product()
    }

    pub fn kernel_volume(&self) -> usize {
        self.kernel.iter().product()
    }

    pub fn is_padded(&self) -> bool {
        self.padded != self.input
    }

    /// Row index (into the `[T*H*W, C]` input) for each (patch, kernel offset)
    /// pair, patch-major; padding maps to [`ZERO_ROW`].
    pub fn unfold_index(&self) -> Vec<u32> {
        let [t_in, h_in, w_in] = self.input;
        let [kt, kh, kw] = self.kernel;
        let [to, ho, wo] = self.output;
        let mut idx = Vec::with_capacity(self.patches() * self.kernel_volume());
        for pt in 0..to {
            for ph in 0..ho {
                for pw in 0..wo {
                    for dt in 0..kt {
                        for dh in 0..kh {
                            for dw in 0..kw {
                                let (t, h, w) = (pt * kt + dt, ph * kh + dh, pw * kw + dw);
                                idx.push(if t < t_in && h < h_in && w < w_in {
                                    ((t * h_in + h) * w_in + w) as u32
                                } else {
                                    ZERO_ROW
                                });
                            }
                        }
                    }
                }
            }
        }
        idx
    }
}

/// Patch-embedding convolution: `x` is `[T, H, W, Cin]`, `weight` is
/// `[kt*kh*kw*Cin, Cout]` (rows ordered dt, dh, dw, cin) and `bias` is `[Cout]`.
/// Returns `[T', H', W', Cout]`.
pub fn conv3d_as_patches(
    g: &mut Graph,
    x: Var,
    weight: Var,
    bias: Var,
    kernel: [usize; 3],
    stride: [usize; 3],
) -> Result<(Var, PatchGeometry)> {
    if stride != kernel {
        return Err(arg_err!(
            "patch convolution needs stride == kernel, got {stride:?} vs {kernel:?}"
        ));
    }
    let shape = g.shape(x).to_vec();
    let [t, h, w, cin] = shape[..] else {
        return Err(dim_err!("conv3d input must be [T,H,W,C], got {:?}", shape));
    };
    let geo = PatchGeometry::new([t, h, w], kernel)?;
    let k_in = geo.kernel_volume() * cin;
    let cout = *g.shape(weight).get(1).unwrap_or(&0);
    if g.shape(weight) != [k_in, cout] || g.shape(bias) != [cout] {
        return Err(dim_err!(
            "conv3d weight {:?} / bias {:?} do not fit {k_in} inputs",
            g.shape(weight),
            g.shape(bias)
        ));
    }
    let rows = g.reshape(x, &[t * h * w, cin])?;
    let cols = g.gather_rows(rows, Arc::new(geo.unfold_index()))?;
    let cols = g.reshape(cols, &[geo.patches(), k_in])?;
    let y = g.matmul(cols, weight)?;
    let y = g.add_broadcast(y, bias)?;
    let [to, ho, wo] = geo.output;
    let y = g.reshape(y, &[to, ho, wo, cout])?;
    Ok((y, geo))
}
