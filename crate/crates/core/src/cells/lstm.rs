use super::{sigmoid, uniform_init, NetworkState};
use crate::error::{ensure_finite, Error, Result};
use crate::linalg::{gemm, Matrix};
use crate::sparsity::MaskSet;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::borrow::Cow;

/// One LSTM layer. Gate blocks are stacked row-wise in the order
/// forget, input, output, candidate: `w` is `4H x I`, `u` is `4H x H`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LstmLayer {
    pub w: Matrix,
    pub u: Matrix,
    pub b: Vec<f64>,
}

pub(crate) const F: usize = 0;
pub(crate) const I: usize = 1;
pub(crate) const O: usize = 2;
pub(crate) const C: usize = 3;

impl LstmLayer {
    pub fn random<R: Rng + ?Sized>(hidden: usize, input: usize, rng: &mut R) -> Self {
        let w = uniform_init(4 * hidden, input, hidden, rng);
        let u = uniform_init(4 * hidden, hidden, hidden, rng);
        let bound = 1.0 / (hidden as f64).sqrt();
        let b = (0..4 * hidden).map(|_| rng.random_range(-bound..=bound)).collect();
        Self { w, u, b }
    }

    pub fn zeros(hidden: usize, input: usize) -> Self {
        Self {
            w: Matrix::zeros(4 * hidden, input),
            u: Matrix::zeros(4 * hidden, hidden),
            b: vec![0.0; 4 * hidden],
        }
    }

    pub fn hidden(&self) -> usize {
        self.u.cols()
    }

    pub fn input(&self) -> usize {
        self.w.cols()
    }

    fn validate(&self) -> Result<()> {
        let h = self.hidden();
        if self.w.rows() != 4 * h || self.u.rows() != 4 * h || self.b.len() != 4 * h {
            return Err(Error::Dimension(format!(
                "LSTM layer shapes inconsistent: w {:?}, u {:?}, b {}",
                self.w.shape(),
                self.u.shape(),
                self.b.len()
            )));
        }
        Ok(())
    }
}

/// Applies `masks` (ordered `[W_0, U_0, W_1, U_1, ...]`) to the weights.
fn effective<'a>(params: &'a [LstmLayer], masks: Option<&MaskSet>) -> Result<Cow<'a, [LstmLayer]>> {
    let Some(masks) = masks else {
        return Ok(Cow::Borrowed(params));
    };
    if masks.len() != 2 * params.len() {
        return Err(Error::Dimension(format!(
            "{} masks for {} LSTM layers",
            masks.len(),
            params.len()
        )));
    }
    let layers = params
        .iter()
        .enumerate()
        .map(|(l, p)| {
            Ok(LstmLayer {
                w: masks.masks[2 * l].masked(&p.w)?,
                u: masks.masks[2 * l + 1].masked(&p.u)?,
                b: p.b.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Cow::Owned(layers))
}

/// Gate activations of one layer at one step.
struct LayerEval {
    f: Vec<f64>,
    i: Vec<f64>,
    o: Vec<f64>,
    g: Vec<f64>,
    c_new: Vec<f64>,
    tanh_c: Vec<f64>,
    h_new: Vec<f64>,
}

fn eval_layer(p: &LstmLayer, h: &[f64], c: &[f64], x: &[f64]) -> LayerEval {
    let n = p.hidden();
    let mut y = p.b.clone();
    gemm(1.0, p.w.data(), p.w.shape(), false, x, (x.len(), 1), false, 1.0, &mut y);
    gemm(1.0, p.u.data(), p.u.shape(), false, h, (n, 1), false, 1.0, &mut y);
    let f: Vec<f64> = y[F * n..(F + 1) * n].iter().map(|&v| sigmoid(v)).collect();
    let i: Vec<f64> = y[I * n..(I + 1) * n].iter().map(|&v| sigmoid(v)).collect();
    let o: Vec<f64> = y[O * n..(O + 1) * n].iter().map(|&v| sigmoid(v)).collect();
    let g: Vec<f64> = y[C * n..(C + 1) * n].iter().map(|v| v.tanh()).collect();
    let c_new: Vec<f64> = (0..n).map(|k| f[k] * c[k] + i[k] * g[k]).collect();
    let tanh_c: Vec<f64> = c_new.iter().map(|v| v.tanh()).collect();
    let h_new = (0..n).map(|k| o[k] * tanh_c[k]).collect();
    LayerEval {
        f,
        i,
        o,
        g,
        c_new,
        tanh_c,
        h_new,
    }
}

fn check_inputs(params: &[LstmLayer], state: &NetworkState, x: &[f64]) -> Result<()> {
    if params.is_empty() {
        return Err(Error::Dimension("LSTM needs at least one layer".into()));
    }
    if state.h.len() != params.len() || state.c.len() != params.len() {
        return Err(Error::Dimension(format!(
            "state has {} hidden / {} cell layers for a {}-layer LSTM",
            state.h.len(),
            state.c.len(),
            params.len()
        )));
    }
    let mut input = x.len();
    for (l, p) in params.iter().enumerate() {
        p.validate()?;
        if p.input() != input {
            return Err(Error::Dimension(format!(
                "layer {l} expects input {} but receives {input}",
                p.input()
            )));
        }
        if state.h[l].len() != p.hidden() || state.c[l].len() != p.hidden() {
            return Err(Error::Dimension(format!("layer {l} state size mismatch")));
        }
        input = p.hidden();
    }
    ensure_finite(x, "LSTM input")?;
    for l in 0..params.len() {
        ensure_finite(&state.h[l], "LSTM hidden state")?;
        ensure_finite(&state.c[l], "LSTM cell state")?;
    }
    Ok(())
}

/// One time step of the stacked LSTM. Layer `l > 0` consumes the new `h` of
/// layer `l - 1`.
pub fn lstm_step(
    params: &[LstmLayer],
    masks: Option<&MaskSet>,
    state: &NetworkState,
    x: &[f64],
) -> Result<NetworkState> {
    check_inputs(params, state, x)?;
    let params = effective(params, masks)?;
    let mut out = state.clone();
    let mut input = x.to_vec();
    for (l, p) in params.iter().enumerate() {
        let ev = eval_layer(p, &state.h[l], &state.c[l], &input);
        out.c[l] = ev.c_new;
        out.h[l] = ev.h_new;
        input = out.h[l].clone();
    }
    Ok(out)
}

/// Jacobian of the flattened new state with respect to the flattened old
/// state (layout of [`NetworkState::flatten`]).
pub fn lstm_jacobian(
    params: &[LstmLayer],
    masks: Option<&MaskSet>,
    state: &NetworkState,
    x: &[f64],
) -> Result<Matrix> {
    Ok(lstm_step_with_jacobian(params, masks, state, x)?.1)
}

/// Forward step and Jacobian in one pass.
///
/// Within a layer, with `M` standing for `U` (state columns) or `W` (input):
///
/// ```text
/// dc'/dz = diag(c f(1-f)) M_f + diag(g i(1-i)) M_i + diag(i (1-g^2)) M_c
/// dh'/dz = diag(tanh(c') o(1-o)) M_o + diag(o sech^2(c')) dc'/dz
/// dc'/dc = diag(f),   dh'/dc = diag(o sech^2(c') f)
/// ```
///
/// Layers chain through the input derivative, so the matrix is block lower
/// triangular in layer order.
pub fn lstm_step_with_jacobian(
    params: &[LstmLayer],
    masks: Option<&MaskSet>,
    state: &NetworkState,
    x: &[f64],
) -> Result<(NetworkState, Matrix)> {
    check_inputs(params, state, x)?;
    let params = effective(params, masks)?;
    let dim = state.dim();
    let mut jac = Matrix::zeros(dim, dim);
    let mut out = state.clone();

    let mut input = x.to_vec();
    let mut offset = 0;
    // Rows of the previous layer's new h with respect to the full old state.
    let mut prev_h_rows: Option<Matrix> = None;

    for (l, p) in params.iter().enumerate() {
        let n = p.hidden();
        let ni = p.input();
        let c_old = &state.c[l];
        let ev = eval_layer(p, &state.h[l], c_old, &input);

        // Per-unit coefficients of the gate rows.
        let mut a_f = vec![0.0; n];
        let mut a_i = vec![0.0; n];
        let mut a_c = vec![0.0; n];
        let mut a_o = vec![0.0; n];
        let mut k = vec![0.0; n];
        for r in 0..n {
            a_f[r] = c_old[r] * ev.f[r] * (1.0 - ev.f[r]);
            a_i[r] = ev.g[r] * ev.i[r] * (1.0 - ev.i[r]);
            a_c[r] = ev.i[r] * (1.0 - ev.g[r] * ev.g[r]);
            a_o[r] = ev.tanh_c[r] * ev.o[r] * (1.0 - ev.o[r]);
            k[r] = ev.o[r] * (1.0 - ev.tanh_c[r] * ev.tanh_c[r]);
        }

        // d(h', c') / d(input): 2n x ni, rows h' then c'.
        let d_in = gate_chain(&p.w, n, ni, &a_f, &a_i, &a_c, &a_o, &k);
        // d(h', c') / d(h_old): 2n x n.
        let d_h = gate_chain(&p.u, n, n, &a_f, &a_i, &a_c, &a_o, &k);

        // Diagonal block over this layer's own (h, c).
        for r in 0..n {
            let row_h = offset + r;
            let row_c = offset + n + r;
            for j in 0..n {
                jac[(row_h, offset + j)] = d_h[(r, j)];
                jac[(row_c, offset + j)] = d_h[(n + r, j)];
            }
            jac[(row_h, offset + n + r)] = k[r] * ev.f[r];
            jac[(row_c, offset + n + r)] = ev.f[r];
        }

        // Cross-layer blocks: d_in · d(h_{l-1}') / d(old state), columns < offset.
        if let Some(prev) = &prev_h_rows {
            let mut cross = vec![0.0; 2 * n * dim];
            gemm(1.0, d_in.data(), d_in.shape(), false, prev.data(), prev.shape(), false, 0.0, &mut cross);
            for r in 0..2 * n {
                let dst = jac.row_mut(offset + r);
                dst[..offset].copy_from_slice(&cross[r * dim..r * dim + offset]);
            }
        }

        prev_h_rows = Some(Matrix::from_fn(n, dim, |r, j| jac[(offset + r, j)]));
        out.c[l] = ev.c_new;
        out.h[l] = ev.h_new;
        input = out.h[l].clone();
        offset += 2 * n;
    }
    Ok((out, jac))
}

/// Stacks dh'/dz over dc'/dz for a weight block `m` (4n x cols).
#[allow(clippy::too_many_arguments)]
fn gate_chain(
    m: &Matrix,
    n: usize,
    cols: usize,
    a_f: &[f64],
    a_i: &[f64],
    a_c: &[f64],
    a_o: &[f64],
    k: &[f64],
) -> Matrix {
    let mut out = Matrix::zeros(2 * n, cols);
    for r in 0..n {
        let mf = m.row(F * n + r);
        let mi = m.row(I * n + r);
        let mo = m.row(O * n + r);
        let mc = m.row(C * n + r);
        for j in 0..cols {
            let dc = a_f[r] * mf[j] + a_i[r] * mi[j] + a_c[r] * mc[j];
            out[(n + r, j)] = dc;
            out[(r, j)] = a_o[r] * mo[j] + k[r] * dc;
        }
    }
    out
}
