//! Batched forward pass and truncated backpropagation through time over one
//! `bptt x batch` block. Activations are laid out time-major: row `t * B + b`
//! holds sequence `b` at step `t`.

use super::model::{CellParams, SparseModel};
use crate::cells::sigmoid;
use crate::linalg::gemm;
use crate::error::{Error, Result};
use rand::Rng;

/// Recurrent state carried between blocks, one `B x H` buffer per layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchState {
    pub h: Vec<Vec<f64>>,
    /// Empty for RHN.
    pub c: Vec<Vec<f64>>,
}

impl BatchState {
    pub fn zeros(model: &SparseModel, batch: usize) -> Self {
        let h = model.spec.hidden;
        match &model.cell {
            CellParams::Lstm(layers) => Self {
                h: vec![vec![0.0; batch * h]; layers.len()],
                c: vec![vec![0.0; batch * h]; layers.len()],
            },
            CellParams::Rhn(_) => Self {
                h: vec![vec![0.0; batch * h]],
                c: Vec::new(),
            },
        }
    }
}

struct LstmCache {
    x: Vec<f64>,
    /// Activated gates `[f, i, o, g]` per row.
    gates: Vec<f64>,
    c_prev: Vec<f64>,
    h_prev: Vec<f64>,
    tanh_c: Vec<f64>,
}

struct RhnCache {
    x: Vec<f64>,
    /// Per (t, depth): depth input `s`, and gates p, e, c.
    s: Vec<Vec<f64>>,
    p: Vec<Vec<f64>>,
    e: Vec<Vec<f64>>,
    c: Vec<Vec<f64>>,
}

enum CoreCache {
    Lstm(Vec<LstmCache>),
    Rhn(RhnCache),
}

struct Forward {
    core: CoreCache,
    /// Top hidden outputs after dropout, `TB x H`.
    top: Vec<f64>,
    /// Dropout multipliers (already scaled), empty when no dropout.
    keep: Vec<f64>,
    /// Softmax probabilities, `TB x V`.
    probs: Vec<f64>,
    loss: f64,
}

fn embed(model: &SparseModel, tokens: &[u32]) -> Result<Vec<f64>> {
    let e = model.spec.embed;
    let mut x = Vec::with_capacity(tokens.len() * e);
    for &t in tokens {
        if t as usize >= model.spec.vocab {
            return Err(Error::Dimension(format!("token {t} outside vocabulary of {}", model.spec.vocab)));
        }
        x.extend_from_slice(model.embedding.row(t as usize));
    }
    Ok(x)
}

fn lstm_forward(model: &SparseModel, state: &mut BatchState, x0: Vec<f64>, steps: usize, batch: usize) -> (Vec<LstmCache>, Vec<f64>) {
    let CellParams::Lstm(layers) = &model.cell else { unreachable!() };
    let n = model.spec.hidden;
    let rows = steps * batch;
    let mut caches = Vec::with_capacity(layers.len());
    let mut input = x0;
    for (l, p) in layers.iter().enumerate() {
        let ni = p.input();
        let mut pre = vec![0.0; rows * 4 * n];
        gemm(1.0, &input, (rows, ni), false, p.w.data(), p.w.shape(), true, 0.0, &mut pre);
        let mut h_prev = vec![0.0; rows * n];
        let mut c_prev = vec![0.0; rows * n];
        let mut tanh_c = vec![0.0; rows * n];
        let mut out = vec![0.0; rows * n];
        let mut h = std::mem::take(&mut state.h[l]);
        let mut c = std::mem::take(&mut state.c[l]);
        for t in 0..steps {
            let blk = t * batch * n..(t + 1) * batch * n;
            h_prev[blk.clone()].copy_from_slice(&h);
            c_prev[blk.clone()].copy_from_slice(&c);
            let y = &mut pre[t * batch * 4 * n..(t + 1) * batch * 4 * n];
            gemm(1.0, &h, (batch, n), false, p.u.data(), p.u.shape(), true, 1.0, y);
            for b in 0..batch {
                let yr = &mut y[b * 4 * n..(b + 1) * 4 * n];
                for k in 0..n {
                    let f = sigmoid(yr[k] + p.b[k]);
                    let i = sigmoid(yr[n + k] + p.b[n + k]);
                    let o = sigmoid(yr[2 * n + k] + p.b[2 * n + k]);
                    let g = (yr[3 * n + k] + p.b[3 * n + k]).tanh();
                    yr[k] = f;
                    yr[n + k] = i;
                    yr[2 * n + k] = o;
                    yr[3 * n + k] = g;
                    let cn = f * c[b * n + k] + i * g;
                    let tc = cn.tanh();
                    c[b * n + k] = cn;
                    h[b * n + k] = o * tc;
                    tanh_c[t * batch * n + b * n + k] = tc;
                }
            }
            out[blk].copy_from_slice(&h);
        }
        state.h[l] = h;
        state.c[l] = c;
        caches.push(LstmCache {
            x: input,
            gates: pre,
            c_prev,
            h_prev,
            tanh_c,
        });
        input = out;
    }
    (caches, input)
}

fn rhn_forward(model: &SparseModel, state: &mut BatchState, x0: Vec<f64>, steps: usize, batch: usize) -> (RhnCache, Vec<f64>) {
    let CellParams::Rhn(p) = &model.cell else { unreachable!() };
    let n = model.spec.hidden;
    let g = p.w.rows() / n;
    let depth = p.depth();
    let rows = steps * batch;
    let mut xw = vec![0.0; rows * g * n];
    gemm(1.0, &x0, (rows, p.input()), false, p.w.data(), p.w.shape(), true, 0.0, &mut xw);
    let mut cache = RhnCache {
        x: x0,
        s: Vec::with_capacity(steps * depth),
        p: Vec::with_capacity(steps * depth),
        e: Vec::with_capacity(steps * depth),
        c: Vec::with_capacity(steps * depth),
    };
    let mut out = vec![0.0; rows * n];
    let mut s = std::mem::take(&mut state.h[0]);
    for t in 0..steps {
        for l in 0..depth {
            let mut y = vec![0.0; batch * g * n];
            if l == 0 {
                y.copy_from_slice(&xw[t * batch * g * n..(t + 1) * batch * g * n]);
            }
            gemm(1.0, &s, (batch, n), false, p.r[l].data(), p.r[l].shape(), true, 1.0, &mut y);
            let mut pv = vec![0.0; batch * n];
            let mut ev = vec![0.0; batch * n];
            let mut cv = vec![0.0; batch * n];
            let mut next = vec![0.0; batch * n];
            for b in 0..batch {
                let yr = &y[b * g * n..(b + 1) * g * n];
                for k in 0..n {
                    let pk = (yr[k] + p.b[l][k]).tanh();
                    let ek = sigmoid(yr[n + k] + p.b[l][n + k]);
                    let ck = if p.coupled {
                        1.0 - ek
                    } else {
                        sigmoid(yr[2 * n + k] + p.b[l][2 * n + k])
                    };
                    let idx = b * n + k;
                    pv[idx] = pk;
                    ev[idx] = ek;
                    cv[idx] = ck;
                    next[idx] = pk * ek + s[idx] * ck;
                }
            }
            cache.s.push(std::mem::replace(&mut s, next));
            cache.p.push(pv);
            cache.e.push(ev);
            cache.c.push(cv);
        }
        out[t * batch * n..(t + 1) * batch * n].copy_from_slice(&s);
    }
    state.h[0] = s;
    (cache, out)
}

fn decoder_weights(model: &SparseModel) -> &[f64] {
    match &model.decoder {
        Some(d) => d.data(),
        None => model.embedding.data(),
    }
}

fn forward<R: Rng + ?Sized>(
    model: &SparseModel,
    state: &mut BatchState,
    inputs: &[u32],
    targets: &[u32],
    batch: usize,
    dropout_rng: Option<&mut R>,
) -> Result<Forward> {
    let rows = inputs.len();
    if !rows.is_multiple_of(batch) || targets.len() != rows {
        return Err(Error::Dimension(format!(
            "block of {rows} inputs / {} targets is not a multiple of batch {batch}",
            targets.len()
        )));
    }
    let steps = rows / batch;
    let x0 = embed(model, inputs)?;
    let (core, mut top) = match &model.cell {
        CellParams::Lstm(_) => {
            let (c, out) = lstm_forward(model, state, x0, steps, batch);
            (CoreCache::Lstm(c), out)
        }
        CellParams::Rhn(_) => {
            let (c, out) = rhn_forward(model, state, x0, steps, batch);
            (CoreCache::Rhn(c), out)
        }
    };

    let mut keep = Vec::new();
    let p = model.spec.dropout;
    if let Some(rng) = dropout_rng {
        if p > 0.0 {
            let scale = 1.0 / (1.0 - p);
            keep = (0..top.len())
                .map(|_| if rng.random::<f64>() < p { 0.0 } else { scale })
                .collect();
            top.iter_mut().zip(&keep).for_each(|(v, k)| *v *= k);
        }
    }

    let n = model.spec.hidden;
    let v = model.spec.vocab;
    let mut probs = vec![0.0; rows * v];
    gemm(1.0, &top, (rows, n), false, decoder_weights(model), (v, n), true, 0.0, &mut probs);
    let mut loss = 0.0;
    for (r, &target) in targets.iter().enumerate() {
        if target as usize >= v {
            return Err(Error::Dimension(format!("target {target} outside vocabulary of {v}")));
        }
        let row = &mut probs[r * v..(r + 1) * v];
        row.iter_mut().zip(&model.decoder_bias).for_each(|(z, b)| *z += b);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for z in row.iter_mut() {
            *z = (*z - max).exp();
            sum += *z;
        }
        loss += sum.ln() - (row[target as usize].ln());
        row.iter_mut().for_each(|z| *z /= sum);
    }
    Ok(Forward {
        core,
        top,
        keep,
        probs,
        loss: loss / rows as f64,
    })
}

/// Mean per-token cross-entropy of a block without dropout. Advances `state`.
pub fn block_loss(model: &SparseModel, state: &mut BatchState, inputs: &[u32], targets: &[u32], batch: usize) -> Result<f64> {
    Ok(forward::<rand_chacha::ChaCha8Rng>(model, state, inputs, targets, batch, None)?.loss)
}

/// Mean per-token cross-entropy and its gradient with respect to every tensor
/// of [`SparseModel::tensors`]. The incoming `state` is treated as a constant
/// (truncated BPTT); on return it holds the state after the block.
pub fn block_loss_and_grads<R: Rng + ?Sized>(
    model: &SparseModel,
    state: &mut BatchState,
    inputs: &[u32],
    targets: &[u32],
    batch: usize,
    dropout_rng: Option<&mut R>,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let fwd = forward(model, state, inputs, targets, batch, dropout_rng)?;
    let mut grads: Vec<Vec<f64>> = model.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
    let rows = inputs.len();
    let steps = rows / batch;
    let n = model.spec.hidden;
    let v = model.spec.vocab;
    let e = model.spec.embed;

    // Softmax cross-entropy.
    let mut dlogits = fwd.probs;
    for (r, &target) in targets.iter().enumerate() {
        dlogits[r * v + target as usize] -= 1.0;
    }
    let inv = 1.0 / rows as f64;
    dlogits.iter_mut().for_each(|d| *d *= inv);

    let bias_idx = grads.len() - 1;
    for r in 0..rows {
        for (g, d) in grads[bias_idx].iter_mut().zip(&dlogits[r * v..(r + 1) * v]) {
            *g += d;
        }
    }
    let dec_idx = if model.decoder.is_some() { bias_idx - 1 } else { 0 };
    gemm(1.0, &dlogits, (rows, v), true, &fwd.top, (rows, n), false, 1.0, &mut grads[dec_idx]);
    let mut d_top = vec![0.0; rows * n];
    gemm(1.0, &dlogits, (rows, v), false, decoder_weights(model), (v, n), false, 0.0, &mut d_top);
    if !fwd.keep.is_empty() {
        d_top.iter_mut().zip(&fwd.keep).for_each(|(d, k)| *d *= k);
    }

    let d_x0 = match (&model.cell, fwd.core) {
        (CellParams::Lstm(layers), CoreCache::Lstm(caches)) => {
            let mut d_out = d_top;
            for (l, (p, cache)) in layers.iter().zip(&caches).enumerate().rev() {
                let ni = p.input();
                let mut dy = vec![0.0; rows * 4 * n];
                let mut dh_next = vec![0.0; batch * n];
                let mut dc_next = vec![0.0; batch * n];
                for t in (0..steps).rev() {
                    for b in 0..batch {
                        let r = t * batch + b;
                        let gates = &cache.gates[r * 4 * n..(r + 1) * 4 * n];
                        let dyr = &mut dy[r * 4 * n..(r + 1) * 4 * n];
                        for k in 0..n {
                            let (f, i, o, g) = (gates[k], gates[n + k], gates[2 * n + k], gates[3 * n + k]);
                            let tc = cache.tanh_c[r * n + k];
                            let dh = d_out[r * n + k] + dh_next[b * n + k];
                            let dc = dh * o * (1.0 - tc * tc) + dc_next[b * n + k];
                            dyr[k] = dc * cache.c_prev[r * n + k] * f * (1.0 - f);
                            dyr[n + k] = dc * g * i * (1.0 - i);
                            dyr[2 * n + k] = dh * tc * o * (1.0 - o);
                            dyr[3 * n + k] = dc * i * (1.0 - g * g);
                            dc_next[b * n + k] = dc * f;
                        }
                    }
                    let dyt = &dy[t * batch * 4 * n..(t + 1) * batch * 4 * n];
                    gemm(1.0, dyt, (batch, 4 * n), false, p.u.data(), p.u.shape(), false, 0.0, &mut dh_next);
                }
                let base = 1 + 3 * l;
                gemm(1.0, &dy, (rows, 4 * n), true, &cache.x, (rows, ni), false, 1.0, &mut grads[base]);
                gemm(1.0, &dy, (rows, 4 * n), true, &cache.h_prev, (rows, n), false, 1.0, &mut grads[base + 1]);
                for r in 0..rows {
                    for (g, d) in grads[base + 2].iter_mut().zip(&dy[r * 4 * n..(r + 1) * 4 * n]) {
                        *g += d;
                    }
                }
                let mut dx = vec![0.0; rows * ni];
                gemm(1.0, &dy, (rows, 4 * n), false, p.w.data(), p.w.shape(), false, 0.0, &mut dx);
                d_out = dx;
            }
            d_out
        }
        (CellParams::Rhn(p), CoreCache::Rhn(cache)) => {
            let depth = p.depth();
            let g = p.w.rows() / n;
            let mut dy0 = vec![0.0; rows * g * n];
            let mut ds_next = vec![0.0; batch * n];
            let mut dy = vec![0.0; batch * g * n];
            for t in (0..steps).rev() {
                let mut ds: Vec<f64> = (0..batch * n).map(|i| d_top[t * batch * n + i] + ds_next[i]).collect();
                for l in (0..depth).rev() {
                    let at = t * depth + l;
                    let (s, pv, ev, cv) = (&cache.s[at], &cache.p[at], &cache.e[at], &cache.c[at]);
                    let mut ds_prev = vec![0.0; batch * n];
                    for b in 0..batch {
                        for k in 0..n {
                            let idx = b * n + k;
                            let d = ds[idx];
                            let (pk, ek, ck, sk) = (pv[idx], ev[idx], cv[idx], s[idx]);
                            let row = b * g * n;
                            dy[row + k] = d * ek * (1.0 - pk * pk);
                            if p.coupled {
                                dy[row + n + k] = d * (pk - sk) * ek * (1.0 - ek);
                            } else {
                                dy[row + n + k] = d * pk * ek * (1.0 - ek);
                                dy[row + 2 * n + k] = d * sk * ck * (1.0 - ck);
                            }
                            ds_prev[idx] = d * ck;
                        }
                    }
                    gemm(1.0, &dy, (batch, g * n), true, s, (batch, n), false, 1.0, &mut grads[2 + l]);
                    let b_idx = 2 + depth + l;
                    for b in 0..batch {
                        for (gb, d) in grads[b_idx].iter_mut().zip(&dy[b * g * n..(b + 1) * g * n]) {
                            *gb += d;
                        }
                    }
                    gemm(1.0, &dy, (batch, g * n), false, p.r[l].data(), p.r[l].shape(), false, 1.0, &mut ds_prev);
                    if l == 0 {
                        dy0[t * batch * g * n..(t + 1) * batch * g * n].copy_from_slice(&dy);
                    }
                    ds = ds_prev;
                }
                ds_next = ds;
            }
            gemm(1.0, &dy0, (rows, g * n), true, &cache.x, (rows, e), false, 1.0, &mut grads[1]);
            let mut dx = vec![0.0; rows * e];
            gemm(1.0, &dy0, (rows, g * n), false, p.w.data(), p.w.shape(), false, 0.0, &mut dx);
            dx
        }
        _ => unreachable!("cache built from the same cell"),
    };

    for (r, &tok) in inputs.iter().enumerate() {
        let row = &mut grads[0][tok as usize * e..(tok as usize + 1) * e];
        row.iter_mut().zip(&d_x0[r * e..(r + 1) * e]).for_each(|(g, d)| *g += d);
    }
    Ok((fwd.loss, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sparsity::InitMode;
    use crate::training::model::{ArchKind, ModelSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spec(arch: ArchKind, coupled: bool, tied: bool) -> ModelSpec {
        ModelSpec {
            arch,
            vocab: 6,
            embed: 4,
            hidden: 4,
            layers: 2,
            coupled,
            tied,
            dropout: 0.0,
        }
    }

    /// Central differences of the block loss against every parameter.
    fn check_gradients(model: &SparseModel) {
        let batch = 3;
        let inputs: Vec<u32> = vec![0, 1, 2, 3, 4, 5, 1, 1, 2, 5, 0, 3];
        let targets: Vec<u32> = vec![1, 2, 3, 4, 5, 0, 2, 0, 4, 1, 3, 2];
        let mut state = BatchState::zeros(model, batch);
        // Start from a nonzero carried state.
        block_loss(model, &mut state, &targets, &inputs, batch).unwrap();
        let (_, grads) =
            block_loss_and_grads::<ChaCha8Rng>(model, &mut state.clone(), &inputs, &targets, batch, None).unwrap();
        let eps = 1e-6;
        let mut worst: f64 = 0.0;
        for (ti, g) in grads.iter().enumerate() {
            for k in 0..g.len() {
                let mut plus = model.clone();
                plus.tensors_mut()[ti][k] += eps;
                let mut minus = model.clone();
                minus.tensors_mut()[ti][k] -= eps;
                let lp = block_loss(&plus, &mut state.clone(), &inputs, &targets, batch).unwrap();
                let lm = block_loss(&minus, &mut state.clone(), &inputs, &targets, batch).unwrap();
                worst = worst.max(((lp - lm) / (2.0 * eps) - g[k]).abs());
            }
        }
        assert!(worst < 1e-7, "max gradient error {worst}");
    }

    #[test]
    fn lstm_gradients_match_finite_differences() {
        check_gradients(&SparseModel::dense(spec(ArchKind::StackedLstm, false, false), 1).unwrap());
        check_gradients(&SparseModel::dense(spec(ArchKind::StackedLstm, false, true), 2).unwrap());
    }

    #[test]
    fn rhn_gradients_match_finite_differences() {
        check_gradients(&SparseModel::dense(spec(ArchKind::Rhn, true, false), 3).unwrap());
        check_gradients(&SparseModel::dense(spec(ArchKind::Rhn, false, true), 4).unwrap());
    }

    #[test]
    fn batched_forward_matches_single_steps() {
        for arch in [ArchKind::StackedLstm, ArchKind::Rhn] {
            let model = SparseModel::new(spec(arch, true, false), InitMode::Uniform, 0.5, 5).unwrap();
            let batch = 2;
            let inputs: Vec<u32> = vec![0, 3, 1, 4, 2, 5];
            let mut state = BatchState::zeros(&model, batch);
            block_loss(&model, &mut state, &inputs, &inputs, batch).unwrap();
            for b in 0..batch {
                let mut s = model.zero_state();
                for t in 0..3 {
                    s = model.step(&s, inputs[t * batch + b]).unwrap();
                }
                let n = model.spec.hidden;
                for l in 0..s.h.len() {
                    for k in 0..n {
                        assert!((s.h[l][k] - state.h[l][b * n + k]).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn dropout_gradients_use_the_same_mask() {
        let mut s = spec(ArchKind::StackedLstm, false, false);
        s.dropout = 0.3;
        let model = SparseModel::dense(s, 7).unwrap();
        let inputs: Vec<u32> = vec![0, 1, 2, 3];
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            let mut st = BatchState::zeros(&model, 2);
            block_loss_and_grads(&model, &mut st, &inputs, &inputs, 2, Some(&mut rng)).unwrap()
        };
        assert_eq!(run(), run());
    }
}
