//! Fused sequence operations: depthwise convolution, multi-head attention
//! and the LSTM recurrence. Each works on a padded batch described by a
//! [`SeqLayout`] and never reads or writes padded rows.

use super::gemm::{gemm, matmul_into, matmul_nt_into, matmul_tn_into, Layout};
use super::tape::{sigmoid_f, SeqLayout, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

fn check_rows(op: &'static str, t: &Tensor, layout: &SeqLayout) -> Result<()> {
    if t.rank() != 2 || t.rows() != layout.rows() {
        return Err(Error::Dimension {
            op,
            left: t.shape().to_vec(),
            right: vec![layout.batch_size(), layout.t_max],
        });
    }
    Ok(())
}

pub(crate) fn depthwise_forward(x: &Tensor, kernel: &Tensor, layout: &SeqLayout) -> Result<Tensor> {
    check_rows("depthwise_conv1d", x, layout)?;
    let d = x.cols();
    if kernel.rank() != 2 || kernel.cols() != d {
        return Err(Error::Dimension {
            op: "depthwise_conv1d kernel",
            left: x.shape().to_vec(),
            right: kernel.shape().to_vec(),
        });
    }
    let k = kernel.shape()[0];
    if k % 2 == 0 {
        return Err(Error::Config(format!("depthwise kernel size must be odd, got {k}")));
    }
    let pad = k / 2;
    let xd = x.data();
    let kd = kernel.data();
    let mut out = vec![0.0; xd.len()];
    for (b, &len) in layout.lengths.iter().enumerate() {
        for t in 0..len {
            let orow = layout.row(b, t) * d;
            for j in 0..k {
                let src = t + j;
                if src < pad || src - pad >= len {
                    continue;
                }
                let irow = layout.row(b, src - pad) * d;
                let krow = &kd[j * d..(j + 1) * d];
                for c in 0..d {
                    out[orow + c] += krow[c] * xd[irow + c];
                }
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

pub(crate) fn depthwise_backward_input(gd: &[f64], kernel: &Tensor, layout: &SeqLayout, gx: &mut [f64]) {
    let k = kernel.shape()[0];
    let d = kernel.cols();
    let pad = k / 2;
    let kd = kernel.data();
    for (b, &len) in layout.lengths.iter().enumerate() {
        for t in 0..len {
            let orow = layout.row(b, t) * d;
            for j in 0..k {
                let src = t + j;
                if src < pad || src - pad >= len {
                    continue;
                }
                let irow = layout.row(b, src - pad) * d;
                let krow = &kd[j * d..(j + 1) * d];
                for c in 0..d {
                    gx[irow + c] += krow[c] * gd[orow + c];
                }
            }
        }
    }
}

pub(crate) fn depthwise_backward_kernel(gd: &[f64], x: &Tensor, k: usize, layout: &SeqLayout, gk: &mut [f64]) {
    let d = x.cols();
    let pad = k / 2;
    let xd = x.data();
    for (b, &len) in layout.lengths.iter().enumerate() {
        for t in 0..len {
            let orow = layout.row(b, t) * d;
            for j in 0..k {
                let src = t + j;
                if src < pad || src - pad >= len {
                    continue;
                }
                let irow = layout.row(b, src - pad) * d;
                let gkrow = &mut gk[j * d..(j + 1) * d];
                for c in 0..d {
                    gkrow[c] += gd[orow + c] * xd[irow + c];
                }
            }
        }
    }
}

pub(crate) struct AttentionCache {
    pub q: Var,
    pub k: Var,
    pub v: Var,
    pub bias: Option<(Var, usize)>,
    pub heads: usize,
    pub layout: SeqLayout,
    /// `[batch, heads, t_max, t_max]`, zero outside each sequence's extent.
    pub probs: Vec<f64>,
}

fn rel_index(query: usize, key: usize, max_rel: usize) -> usize {
    let off = key as isize - query as isize;
    (off.clamp(-(max_rel as isize), max_rel as isize) + max_rel as isize) as usize
}

pub(crate) fn attention_forward(
    tape: &Tape,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    bias: Option<(Var, usize)>,
    layout: &SeqLayout,
) -> Result<(Tensor, AttentionCache)> {
    let (qv, kv, vv) = (tape.value(q), tape.value(k), tape.value(v));
    for t in [qv, kv, vv] {
        check_rows("attention", t, layout)?;
    }
    let d = qv.cols();
    if kv.cols() != d || vv.cols() != d || heads == 0 || d % heads != 0 {
        return Err(Error::Dimension {
            op: "attention heads",
            left: qv.shape().to_vec(),
            right: vec![heads],
        });
    }
    let bias_data = match bias {
        Some((bv, r)) => {
            let bt = tape.value(bv);
            if bt.shape() != [heads, 2 * r + 1] {
                return Err(Error::Dimension {
                    op: "attention relative bias",
                    left: vec![heads, 2 * r + 1],
                    right: bt.shape().to_vec(),
                });
            }
            Some((bt.data(), r))
        }
        None => None,
    };
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let t = layout.t_max;
    let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
    let mut probs = vec![0.0; layout.batch_size() * heads * t * t];
    let mut out = vec![0.0; qd.len()];
    for (b, &len) in layout.lengths.iter().enumerate() {
        if len == 0 {
            continue;
        }
        for h in 0..heads {
            let off = layout.row(b, 0) * d + h * dh;
            let p_off = (b * heads + h) * t * t;
            let scores = &mut probs[p_off..];
            gemm(
                scale,
                &qd[off..],
                Layout::strided(len, dh, d, 1),
                &kd[off..],
                Layout::strided(dh, len, 1, d),
                0.0,
                scores,
                Layout::strided(len, len, t, 1),
            );
            for i in 0..len {
                let row = &mut scores[i * t..i * t + len];
                if let Some((bd, r)) = bias_data {
                    let brow = &bd[h * (2 * r + 1)..(h + 1) * (2 * r + 1)];
                    for (j, s) in row.iter_mut().enumerate() {
                        *s += brow[rel_index(i, j, r)];
                    }
                }
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for s in row.iter_mut() {
                    *s = (*s - max).exp();
                    total += *s;
                }
                row.iter_mut().for_each(|s| *s /= total);
            }
            gemm(
                1.0,
                &probs[p_off..],
                Layout::strided(len, len, t, 1),
                &vd[off..],
                Layout::strided(len, dh, d, 1),
                0.0,
                &mut out[off..],
                Layout::strided(len, dh, d, 1),
            );
        }
    }
    if probs.iter().any(|p| !p.is_finite()) {
        return Err(Error::Numeric("attention scores overflowed".into()));
    }
    let cache = AttentionCache {
        q,
        k,
        v,
        bias,
        heads,
        layout: layout.clone(),
        probs,
    };
    Ok((Tensor::new(qv.shape().to_vec(), out)?, cache))
}

pub(crate) fn attention_backward<'a>(
    c: &AttentionCache,
    gd: &[f64],
    value_of: &dyn Fn(Var) -> &'a Tensor,
    needs: &dyn Fn(Var) -> bool,
) -> Vec<(Var, Vec<f64>)> {
    let (qv, kv, vv) = (value_of(c.q), value_of(c.k), value_of(c.v));
    let d = qv.cols();
    let heads = c.heads;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let t = c.layout.t_max;
    let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
    let mut gq = vec![0.0; qd.len()];
    let mut gk = vec![0.0; kd.len()];
    let mut gv = vec![0.0; vd.len()];
    let mut gb = c.bias.map(|(bv, _)| vec![0.0; value_of(bv).numel()]);
    let mut ds = vec![0.0; t * t];
    for (b, &len) in c.layout.lengths.iter().enumerate() {
        if len == 0 {
            continue;
        }
        for h in 0..heads {
            let off = c.layout.row(b, 0) * d + h * dh;
            let p_off = (b * heads + h) * t * t;
            let p = &c.probs[p_off..];
            // dP = dO · Vᵀ
            gemm(
                1.0,
                &gd[off..],
                Layout::strided(len, dh, d, 1),
                &vd[off..],
                Layout::strided(dh, len, 1, d),
                0.0,
                &mut ds,
                Layout::row_major(len, len),
            );
            // dV += Pᵀ · dO
            gemm(
                1.0,
                p,
                Layout::strided(len, len, 1, t),
                &gd[off..],
                Layout::strided(len, dh, d, 1),
                1.0,
                &mut gv[off..],
                Layout::strided(len, dh, d, 1),
            );
            for i in 0..len {
                let prow = &p[i * t..i * t + len];
                let drow = &mut ds[i * len..(i + 1) * len];
                let dot: f64 = prow.iter().zip(drow.iter()).map(|(a, b)| a * b).sum();
                for (dsv, pv) in drow.iter_mut().zip(prow) {
                    *dsv = pv * (*dsv - dot);
                }
                if let (Some(gbv), Some((_, r))) = (gb.as_mut(), c.bias) {
                    let width = 2 * r + 1;
                    for (j, dsv) in drow.iter().enumerate() {
                        gbv[h * width + rel_index(i, j, r)] += dsv;
                    }
                }
            }
            gemm(
                scale,
                &ds,
                Layout::row_major(len, len),
                &kd[off..],
                Layout::strided(len, dh, d, 1),
                1.0,
                &mut gq[off..],
                Layout::strided(len, dh, d, 1),
            );
            gemm(
                scale,
                &ds,
                Layout::transposed(len, len),
                &qd[off..],
                Layout::strided(len, dh, d, 1),
                1.0,
                &mut gk[off..],
                Layout::strided(len, dh, d, 1),
            );
        }
    }
    let mut grads = Vec::new();
    for (var, g) in [(c.q, gq), (c.k, gk), (c.v, gv)] {
        if needs(var) {
            grads.push((var, g));
        }
    }
    if let (Some((bv, _)), Some(g)) = (c.bias, gb) {
        if needs(bv) {
            grads.push((bv, g));
        }
    }
    grads
}

pub(crate) struct LstmCache {
    pub x: Var,
    pub w_ih: Var,
    pub w_hh: Var,
    pub bias: Var,
    pub layout: SeqLayout,
    pub reverse: bool,
    pub hidden: usize,
    /// Activated gates `(i, f, g, o)` per row.
    pub gates: Vec<f64>,
    pub cells: Vec<f64>,
    pub tanh_cells: Vec<f64>,
}

impl LstmCache {
    /// Time index processed at recurrence step `s` of a length-`len` sequence.
    fn time(&self, s: usize, len: usize) -> usize {
        if self.reverse {
            len - 1 - s
        } else {
            s
        }
    }
}

fn active_at(layout: &SeqLayout, s: usize) -> Vec<usize> {
    (0..layout.batch_size()).filter(|&b| s < layout.lengths[b]).collect()
}

pub(crate) fn lstm_forward(
    tape: &Tape,
    x: Var,
    w_ih: Var,
    w_hh: Var,
    bias: Var,
    layout: &SeqLayout,
    reverse: bool,
) -> Result<(Tensor, LstmCache)> {
    let (xv, wi, wh, bv) = (tape.value(x), tape.value(w_ih), tape.value(w_hh), tape.value(bias));
    check_rows("lstm", xv, layout)?;
    let din = xv.cols();
    let hidden = wh.shape().first().copied().unwrap_or(0);
    let g4 = 4 * hidden;
    if wi.shape() != [din, g4] || wh.shape() != [hidden, g4] || bv.numel() != g4 {
        return Err(Error::Dimension {
            op: "lstm weights",
            left: vec![din, hidden],
            right: [wi.shape(), wh.shape(), bv.shape()].concat(),
        });
    }
    let rows = layout.rows();
    let mut pre = vec![0.0; rows * g4];
    matmul_into(rows, din, g4, xv.data(), wi.data(), &mut pre, false);
    for row in pre.chunks_mut(g4) {
        row.iter_mut().zip(bv.data()).for_each(|(a, b)| *a += b);
    }
    let mut cache = LstmCache {
        x,
        w_ih,
        w_hh,
        bias,
        layout: layout.clone(),
        reverse,
        hidden,
        gates: vec![0.0; rows * g4],
        cells: vec![0.0; rows * hidden],
        tanh_cells: vec![0.0; rows * hidden],
    };
    let mut out = vec![0.0; rows * hidden];
    let nb = layout.batch_size();
    let mut h_state = vec![0.0; nb * hidden];
    let mut c_state = vec![0.0; nb * hidden];
    let mut hp = Vec::new();
    let mut rec = Vec::new();
    for s in 0..layout.t_max {
        let active = active_at(layout, s);
        if active.is_empty() {
            break;
        }
        hp.clear();
        for &b in &active {
            hp.extend_from_slice(&h_state[b * hidden..(b + 1) * hidden]);
        }
        rec.resize(active.len() * g4, 0.0);
        matmul_into(active.len(), hidden, g4, &hp, wh.data(), &mut rec, false);
        for (ai, &b) in active.iter().enumerate() {
            let row = layout.row(b, cache.time(s, layout.lengths[b]));
            let gates = &mut cache.gates[row * g4..(row + 1) * g4];
            for (j, gv) in gates.iter_mut().enumerate() {
                *gv = pre[row * g4 + j] + rec[ai * g4 + j];
            }
            for j in 0..hidden {
                let i_g = sigmoid_f(gates[j]);
                let f_g = sigmoid_f(gates[hidden + j]);
                let g_g = gates[2 * hidden + j].tanh();
                let o_g = sigmoid_f(gates[3 * hidden + j]);
                gates[j] = i_g;
                gates[hidden + j] = f_g;
                gates[2 * hidden + j] = g_g;
                gates[3 * hidden + j] = o_g;
                let c = f_g * c_state[b * hidden + j] + i_g * g_g;
                let tc = c.tanh();
                let h = o_g * tc;
                cache.cells[row * hidden + j] = c;
                cache.tanh_cells[row * hidden + j] = tc;
                out[row * hidden + j] = h;
                c_state[b * hidden + j] = c;
                h_state[b * hidden + j] = h;
            }
        }
    }
    Ok((Tensor::new(vec![rows, hidden], out)?, cache))
}

pub(crate) fn lstm_backward<'a>(
    c: &LstmCache,
    out: &Tensor,
    gd: &[f64],
    value_of: &dyn Fn(Var) -> &'a Tensor,
    needs: &dyn Fn(Var) -> bool,
) -> Vec<(Var, Vec<f64>)> {
    let hidden = c.hidden;
    let g4 = 4 * hidden;
    let layout = &c.layout;
    let rows = layout.rows();
    let nb = layout.batch_size();
    let (xv, wi, wh) = (value_of(c.x), value_of(c.w_ih), value_of(c.w_hh));
    let din = xv.cols();
    let hv = out.data();
    let mut dgates = vec![0.0; rows * g4];
    let mut dh_carry = vec![0.0; nb * hidden];
    let mut dc_carry = vec![0.0; nb * hidden];
    let mut gwh = vec![0.0; hidden * g4];
    let mut dg_active = Vec::new();
    let mut hp = Vec::new();
    let mut dhp = Vec::new();
    for s in (0..layout.t_max).rev() {
        let active = active_at(layout, s);
        if active.is_empty() {
            continue;
        }
        dg_active.clear();
        hp.clear();
        for &b in &active {
            let len = layout.lengths[b];
            let row = layout.row(b, c.time(s, len));
            let prev_row = (s > 0).then(|| layout.row(b, c.time(s - 1, len)));
            let gates = &c.gates[row * g4..(row + 1) * g4];
            for j in 0..hidden {
                let (i_g, f_g, g_g, o_g) = (gates[j], gates[hidden + j], gates[2 * hidden + j], gates[3 * hidden + j]);
                let tc = c.tanh_cells[row * hidden + j];
                let c_prev = prev_row.map_or(0.0, |p| c.cells[p * hidden + j]);
                let dh = gd[row * hidden + j] + dh_carry[b * hidden + j];
                let dc = dc_carry[b * hidden + j] + dh * o_g * (1.0 - tc * tc);
                let dst = &mut dgates[row * g4..(row + 1) * g4];
                dst[j] = dc * g_g * i_g * (1.0 - i_g);
                dst[hidden + j] = dc * c_prev * f_g * (1.0 - f_g);
                dst[2 * hidden + j] = dc * i_g * (1.0 - g_g * g_g);
                dst[3 * hidden + j] = dh * tc * o_g * (1.0 - o_g);
                dc_carry[b * hidden + j] = dc * f_g;
            }
            dg_active.extend_from_slice(&dgates[row * g4..(row + 1) * g4]);
            match prev_row {
                Some(p) => hp.extend_from_slice(&hv[p * hidden..(p + 1) * hidden]),
                None => hp.extend(std::iter::repeat_n(0.0, hidden)),
            }
        }
        let na = active.len();
        dhp.resize(na * hidden, 0.0);
        matmul_nt_into(na, g4, hidden, &dg_active, wh.data(), &mut dhp, false);
        for (ai, &b) in active.iter().enumerate() {
            dh_carry[b * hidden..(b + 1) * hidden].copy_from_slice(&dhp[ai * hidden..(ai + 1) * hidden]);
        }
        matmul_tn_into(hidden, na, g4, &hp, &dg_active, &mut gwh, true);
    }
    let mut grads = Vec::new();
    if needs(c.x) {
        let mut gx = vec![0.0; rows * din];
        matmul_nt_into(rows, g4, din, &dgates, wi.data(), &mut gx, false);
        grads.push((c.x, gx));
    }
    if needs(c.w_ih) {
        let mut gwi = vec![0.0; din * g4];
        matmul_tn_into(din, rows, g4, xv.data(), &dgates, &mut gwi, false);
        grads.push((c.w_ih, gwi));
    }
    if needs(c.w_hh) {
        grads.push((c.w_hh, gwh));
    }
    if needs(c.bias) {
        let mut gb = vec![0.0; g4];
        for row in dgates.chunks(g4) {
            gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
        }
        grads.push((c.bias, gb));
    }
    grads
}
