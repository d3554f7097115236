//! Channel self-attention computed from the K strongest responses of each
//! channel, tagged with sinusoidal codes of where they were found, and
//! applied residually as `(I + A)·X`.

use std::cmp::Ordering;

use irdet_tensor::{flops, Real, Tensor, Var};

use crate::error::{invalid, Result};
use crate::params::{ParamBuilder, ParamId, Session};
use crate::registry::ChannelAttention;

/// `2^⌊log2(C) + o − 2(i−1)⌋`, or 1 when the exponent is negative.
pub fn compute_k(channels: usize, offset: i32, stage: usize) -> usize {
    let e = ((channels as f64).log2() + offset as f64 - 2.0 * (stage as f64 - 1.0)).floor();
    if e < 0.0 {
        1
    } else {
        1usize << (e as u32)
    }
}

/// Number of points actually selected from an `h×w` map.
pub fn effective_k(k: usize, h: usize, w: usize) -> usize {
    k.clamp(1, (h * w).max(1))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SelectedFeatures<T> {
    /// `C×K`, each row non-increasing.
    pub values: Tensor<T>,
    /// `(row, col)` of each value, row-major over `C×K`.
    pub coords: Vec<(usize, usize)>,
    pub k: usize,
}

/// Linear indices of the `k` largest entries, largest first; equal values
/// are ordered by ascending index. Linear time plus `k log k`.
fn top_indices<T: Real>(channel: &[T], k: usize) -> Vec<usize> {
    let order = |&a: &usize, &b: &usize| {
        channel[b]
            .partial_cmp(&channel[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    };
    let mut idx: Vec<usize> = (0..channel.len()).collect();
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, order);
        idx.truncate(k);
    }
    idx.sort_unstable_by(order);
    idx
}

fn check_k(op: &'static str, k: usize, hw: usize) -> Result<()> {
    if k == 0 || k > hw {
        return Err(invalid(op, format!("k = {k} outside 1..={hw}")));
    }
    Ok(())
}

/// Per-channel top-k of a `C×H×W` tensor.
pub fn topk_select<T: Real>(x: &Tensor<T>, k: usize) -> Result<SelectedFeatures<T>> {
    let [c, h, w] = x.shape()[..] else {
        return Err(invalid("topk_select", format!("expected C×H×W, got {:?}", x.shape())));
    };
    check_k("topk_select", k, h * w)?;
    let mut values = Vec::with_capacity(c * k);
    let mut coords = Vec::with_capacity(c * k);
    for ch in x.data().chunks(h * w) {
        for i in top_indices(ch, k) {
            values.push(ch[i]);
            coords.push((i / w, i % w));
        }
    }
    Ok(SelectedFeatures {
        values: Tensor::new(&[c, k], values)?,
        coords,
        k,
    })
}

/// Differentiable top-k over a `C×H×W` variable: returns the `C×K` values,
/// whose gradient is scattered back to the selected positions, and the
/// selection itself.
pub fn topk_gather<'t, T: Real>(x: Var<'t, T>, k: usize) -> Result<(Var<'t, T>, SelectedFeatures<T>)> {
    let xv = x.value();
    let sel = topk_select(&xv, k)?;
    let (c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
    let hw = h * w;
    let flat: Vec<usize> = sel
        .coords
        .iter()
        .enumerate()
        .map(|(j, &(r, col))| (j / k) * hw + r * w + col)
        .collect();
    let shape = xv.shape().to_vec();
    let out = x.tape().record(
        &[x],
        sel.values.clone(),
        Box::new(move |g, _, _| {
            let mut gx = Tensor::zeros(&shape);
            let d = gx.data_mut();
            for (&i, &gi) in flat.iter().zip(g.data()) {
                d[i] = d[i] + gi;
            }
            vec![Some(gx)]
        }),
    );
    debug_assert_eq!(out.shape(), [c, k]);
    Ok((out, sel))
}

#[derive(Clone, Debug, PartialEq)]
pub struct PosTable<T> {
    /// `H×W` table of sinusoidal codes.
    pub table: Tensor<T>,
}

/// Even columns `2c` hold `sin(r·d_c)`, odd columns `cos(r·d_c)` with
/// `d_c = 2c·exp(−ln(10000)/W)`.
pub fn build_pos_table<T: Real>(h: usize, w: usize) -> Result<PosTable<T>> {
    if w < 2 {
        return Err(invalid("build_pos_table", format!("width {w} is below 2")));
    }
    let scale = (-(10000f64).ln() / w as f64).exp();
    let table = Tensor::from_fn(&[h, w], |i| {
        let (r, col) = ((i / w) as f64, i % w);
        let d = (2 * (col / 2)) as f64 * scale;
        T::of(if col % 2 == 0 { (r * d).sin() } else { (r * d).cos() })
    });
    Ok(PosTable { table })
}

/// Positional code of every selected point, `C×K`.
pub fn gather_positions<T: Real>(sel: &SelectedFeatures<T>, pos: &PosTable<T>) -> Result<Tensor<T>> {
    let (h, w) = pos.table.dims2()?;
    let mut out = Vec::with_capacity(sel.coords.len());
    for &(r, c) in &sel.coords {
        if r >= h || c >= w {
            return Err(invalid(
                "gather_positions",
                format!("coordinate ({r}, {c}) outside {h}×{w} table"),
            ));
        }
        out.push(pos.table.data()[r * w + c]);
    }
    Ok(Tensor::new(sel.values.shape(), out)?)
}

/// `softmax_rows(standardize(Q·Kᵀ))` with `Q = T·W_Q`, `K = T·W_K`.
/// `t` is `C×k'` with `k' ≤ K`; when fewer than K points exist only the
/// first `k'` rows of the projections take part.
pub fn attention_core<'t, T: Real>(
    t: Var<'t, T>,
    w_q: Var<'t, T>,
    w_k: Var<'t, T>,
    eps: T,
) -> Result<Var<'t, T>> {
    let (c, kk) = (t.shape()[0], t.shape()[1]);
    let rows = w_q.shape()[0];
    let (w_q, w_k) = if kk < rows {
        (w_q.slice(0, 0, kk)?, w_k.slice(0, 0, kk)?)
    } else {
        (w_q, w_k)
    };
    let q = t.matmul(w_q)?;
    let key = t.matmul(w_k)?;
    let scores = q.matmul(key.transpose()?)?;
    // A single score standardizes to exactly zero.
    let standardized = if c == 1 {
        scores.scalar_mul(T::zero())
    } else {
        scores.standardize(eps)?
    };
    Ok(standardized.softmax_rows()?)
}

#[derive(Clone, Debug)]
pub struct SeRankBlock {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub channels: usize,
    pub offset_o: i32,
    pub stage: usize,
    pub k: usize,
    pub eps: f64,
    pub positional: bool,
}

/// Arithmetic-operation counts of one forward pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SeRankProfile {
    /// Projections and attention matrix.
    pub attention_ops: u64,
    pub total_ops: u64,
}

impl SeRankBlock {
    pub fn build<T: Real>(
        b: &mut ParamBuilder<'_, T>,
        channels: usize,
        offset_o: i32,
        stage: usize,
        positional: bool,
    ) -> Result<Self> {
        let k = compute_k(channels, offset_o, stage);
        let mut b = b.scope("serank");
        Ok(Self {
            w_q: b.kaiming("w_q", &[k, 2 * k], k)?,
            w_k: b.kaiming("w_k", &[k, 2 * k], k)?,
            channels,
            offset_o,
            stage,
            k,
            eps: 1e-5,
            positional,
        })
    }

    pub fn forward<'t, T: Real>(&self, s: &Session<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        Ok(self.forward_profiled(s, x)?.0)
    }

    /// Also reports operation counts, separating the attention core (whose
    /// cost depends only on C and K) from selection and application.
    pub fn forward_profiled<'t, T: Real>(
        &self,
        s: &Session<'t, T>,
        x: Var<'t, T>,
    ) -> Result<(Var<'t, T>, SeRankProfile)> {
        let start = flops::read();
        let shape = x.shape();
        let [n, c, h, w] = shape[..] else {
            return Err(invalid("serank", format!("expected N×C×H×W, got {shape:?}")));
        };
        if c != self.channels {
            return Err(invalid("serank", format!("block built for {} channels, got {c}", self.channels)));
        }
        let k = effective_k(self.k, h, w);
        let pos = if self.positional {
            Some(build_pos_table::<T>(h, w)?)
        } else {
            None
        };
        let (w_q, w_k) = (s.param(self.w_q), s.param(self.w_k));
        let mut attention_ops = 0;
        let mut outs = Vec::with_capacity(n);
        for b in 0..n {
            let xb = x.slice(0, b, b + 1)?.reshape(&[c, h, w])?;
            let (f, sel) = topk_gather(xb, k)?;
            let t = match &pos {
                Some(pos) => f.add(s.tape().constant(gather_positions(&sel, pos)?))?,
                None => f,
            };
            let (a, ops) = flops::measure(|| attention_core(t, w_q, w_k, T::of(self.eps)));
            attention_ops += ops;
            let flat = xb.reshape(&[c, h * w])?;
            let y = flat.add(a?.matmul(flat)?)?;
            outs.push(y.reshape(&[1, c, h, w])?);
        }
        let out = if n == 1 { outs[0] } else { Var::concat(&outs, 0)? };
        Ok((
            out,
            SeRankProfile {
                attention_ops,
                total_ops: flops::read() - start,
            },
        ))
    }
}

impl<T: Real> ChannelAttention<T> for SeRankBlock {
    fn forward<'t>(&self, s: &Session<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        SeRankBlock::forward(self, s, x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn k_schedule_hand_values() {
        assert_eq!(compute_k(1024, 3, 5), 32);
        assert_eq!(compute_k(64, 3, 1), 512);
        assert_eq!(compute_k(64, 0, 1), 64);
        assert_eq!(compute_k(4, 0, 3), 1);
    }

    #[test]
    fn top_indices_breaks_ties_by_position() {
        assert_eq!(top_indices(&[5.0f64, 5.0, 5.0, 5.0], 2), vec![0, 1]);
        assert_eq!(top_indices(&[3.0f64, 1.0, 4.0, 2.0], 2), vec![2, 0]);
        assert_eq!(top_indices(&[1.0f64, 2.0, 2.0, 0.0], 4), vec![1, 2, 0, 3]);
    }
}
