use super::{sigmoid, uniform_init};
use crate::error::{ensure_finite, Error, Result};
use crate::linalg::{gemm, Matrix};
use crate::sparsity::MaskSet;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::borrow::Cow;

/// Recurrent highway layer of depth `L = r.len()`.
///
/// Gate blocks are stacked row-wise as transform `P`, gate `E` and, unless
/// `coupled`, carry `C`. `w` (`G*H x I`) feeds the input only at depth 1;
/// `r[l]` (`G*H x H`) and `b[l]` belong to depth `l + 1`. A coupled layer has
/// no carry parameters at all: the carry gate is `1 - e`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RhnParams {
    pub w: Matrix,
    pub r: Vec<Matrix>,
    pub b: Vec<Vec<f64>>,
    pub coupled: bool,
}

const P: usize = 0;
const E: usize = 1;
const CARRY: usize = 2;

impl RhnParams {
    pub fn gates(coupled: bool) -> usize {
        if coupled {
            2
        } else {
            3
        }
    }

    pub fn random<R: Rng + ?Sized>(hidden: usize, input: usize, depth: usize, coupled: bool, rng: &mut R) -> Self {
        let g = Self::gates(coupled);
        let w = uniform_init(g * hidden, input, hidden, rng);
        let r = (0..depth).map(|_| uniform_init(g * hidden, hidden, hidden, rng)).collect();
        let bound = 1.0 / (hidden as f64).sqrt();
        let b = (0..depth)
            .map(|_| (0..g * hidden).map(|_| rng.random_range(-bound..=bound)).collect())
            .collect();
        Self { w, r, b, coupled }
    }

    pub fn zeros(hidden: usize, input: usize, depth: usize, coupled: bool) -> Self {
        let g = Self::gates(coupled);
        Self {
            w: Matrix::zeros(g * hidden, input),
            r: vec![Matrix::zeros(g * hidden, hidden); depth],
            b: vec![vec![0.0; g * hidden]; depth],
            coupled,
        }
    }

    pub fn depth(&self) -> usize {
        self.r.len()
    }

    pub fn hidden(&self) -> usize {
        self.w.rows() / Self::gates(self.coupled)
    }

    pub fn input(&self) -> usize {
        self.w.cols()
    }

    fn validate(&self) -> Result<()> {
        let g = Self::gates(self.coupled);
        let h = self.hidden();
        if self.depth() == 0 {
            return Err(Error::Dimension("RHN depth must be at least 1".into()));
        }
        if self.w.rows() != g * h || self.b.len() != self.depth() {
            return Err(Error::Dimension("RHN parameter lists inconsistent".into()));
        }
        for (l, (r, b)) in self.r.iter().zip(&self.b).enumerate() {
            if r.shape() != (g * h, h) || b.len() != g * h {
                return Err(Error::Dimension(format!("RHN depth {} shapes inconsistent", l + 1)));
            }
        }
        Ok(())
    }
}

/// Masks are ordered `[W, R_1, ..., R_L]`.
fn effective<'a>(params: &'a RhnParams, masks: Option<&MaskSet>) -> Result<Cow<'a, RhnParams>> {
    let Some(masks) = masks else {
        return Ok(Cow::Borrowed(params));
    };
    if masks.len() != 1 + params.depth() {
        return Err(Error::Dimension(format!(
            "{} masks for an RHN of depth {}",
            masks.len(),
            params.depth()
        )));
    }
    Ok(Cow::Owned(RhnParams {
        w: masks.masks[0].masked(&params.w)?,
        r: params
            .r
            .iter()
            .enumerate()
            .map(|(l, r)| masks.masks[1 + l].masked(r))
            .collect::<Result<_>>()?,
        b: params.b.clone(),
        coupled: params.coupled,
    }))
}

struct DepthEval {
    p: Vec<f64>,
    e: Vec<f64>,
    c: Vec<f64>,
    /// Sigmoid slope of the carry gate, `c (1 - c)`; unused when coupled.
    dc: Vec<f64>,
    h: Vec<f64>,
}

fn eval_depth(params: &RhnParams, l: usize, s: &[f64], x: &[f64]) -> DepthEval {
    let n = s.len();
    let mut y = params.b[l].clone();
    if l == 0 {
        gemm(1.0, params.w.data(), params.w.shape(), false, x, (x.len(), 1), false, 1.0, &mut y);
    }
    let r = &params.r[l];
    gemm(1.0, r.data(), r.shape(), false, s, (n, 1), false, 1.0, &mut y);
    let p: Vec<f64> = y[P * n..(P + 1) * n].iter().map(|v| v.tanh()).collect();
    let e: Vec<f64> = y[E * n..(E + 1) * n].iter().map(|&v| sigmoid(v)).collect();
    let (c, dc): (Vec<f64>, Vec<f64>) = if params.coupled {
        (e.iter().map(|v| 1.0 - v).collect(), vec![0.0; n])
    } else {
        y[CARRY * n..(CARRY + 1) * n]
            .iter()
            .map(|&v| {
                let c = sigmoid(v);
                (c, c * (1.0 - c))
            })
            .unzip()
    };
    let h = (0..n).map(|k| p[k] * e[k] + s[k] * c[k]).collect();
    DepthEval { p, e, c, dc, h }
}

fn check_inputs(params: &RhnParams, h: &[f64], x: &[f64]) -> Result<()> {
    params.validate()?;
    if h.len() != params.hidden() || x.len() != params.input() {
        return Err(Error::Dimension(format!(
            "RHN expects state {} and input {}, got {} and {}",
            params.hidden(),
            params.input(),
            h.len(),
            x.len()
        )));
    }
    ensure_finite(h, "RHN state")?;
    ensure_finite(x, "RHN input")
}

/// One time step: iterates the highway recurrence over all depths starting
/// from the previous step's depth-`L` output.
pub fn rhn_step(params: &RhnParams, masks: Option<&MaskSet>, h: &[f64], x: &[f64]) -> Result<Vec<f64>> {
    check_inputs(params, h, x)?;
    let params = effective(params, masks)?;
    let mut s = h.to_vec();
    for l in 0..params.depth() {
        s = eval_depth(&params, l, &s, x).h;
    }
    Ok(s)
}

pub fn rhn_jacobian(params: &RhnParams, masks: Option<&MaskSet>, h: &[f64], x: &[f64]) -> Result<Matrix> {
    Ok(rhn_step_with_jacobian(params, masks, h, x)?.1)
}

/// Forward step and Jacobian `J_L ... J_1`, where depth `l` contributes
///
/// ```text
/// J_l = diag(e (1-p^2)) R_P + diag(p e (1-e)) R_E + diag(c) + diag(s) dc/ds
/// dc/ds = diag(c (1-c)) R_C          (uncoupled)
///       = -diag(e (1-e)) R_E         (coupled, c = 1 - e)
/// ```
///
/// with `s` the depth input `h_{l-1}`.
pub fn rhn_step_with_jacobian(
    params: &RhnParams,
    masks: Option<&MaskSet>,
    h: &[f64],
    x: &[f64],
) -> Result<(Vec<f64>, Matrix)> {
    check_inputs(params, h, x)?;
    let params = effective(params, masks)?;
    let n = h.len();
    let mut s = h.to_vec();
    let mut total: Option<Matrix> = None;
    for l in 0..params.depth() {
        let ev = eval_depth(&params, l, &s, x);
        let r = &params.r[l];
        let mut jl = Matrix::zeros(n, n);
        for row in 0..n {
            let a_p = ev.e[row] * (1.0 - ev.p[row] * ev.p[row]);
            let de = ev.e[row] * (1.0 - ev.e[row]);
            let a_e = if params.coupled {
                (ev.p[row] - s[row]) * de
            } else {
                ev.p[row] * de
            };
            let a_c = s[row] * ev.dc[row];
            let rp = r.row(P * n + row);
            let re = r.row(E * n + row);
            let dst = jl.row_mut(row);
            for j in 0..n {
                dst[j] = a_p * rp[j] + a_e * re[j];
            }
            if !params.coupled {
                let rc = r.row(CARRY * n + row);
                for j in 0..n {
                    dst[j] += a_c * rc[j];
                }
            }
            dst[row] += ev.c[row];
        }
        total = Some(match total {
            None => jl,
            Some(prev) => jl.matmul(&prev)?,
        });
        s = ev.h;
    }
    Ok((s, total.expect("depth >= 1 checked")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cells::finite_diff_jacobian;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn random_instance(seed: u64, coupled: bool) -> (RhnParams, Vec<f64>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = RhnParams::random(8, 8, 2, coupled, &mut rng);
        let normal = Normal::new(0.0, 0.5).unwrap();
        let h = (0..8).map(|_| normal.sample(&mut rng)).collect();
        let x = (0..8).map(|_| normal.sample(&mut rng)).collect();
        (params, h, x)
    }

    fn sig(v: f64) -> f64 {
        1.0 / (1.0 + (-v).exp())
    }

    /// Gate-by-gate transcription of the highway recurrence.
    fn reference_step(params: &RhnParams, h: &[f64], x: &[f64]) -> Vec<f64> {
        let n = h.len();
        let mut prev = h.to_vec();
        for l in 0..params.depth() {
            let pre = |gate: usize, r: usize| -> f64 {
                let mut v = params.b[l][gate * n + r];
                if l == 0 {
                    for j in 0..x.len() {
                        v += params.w[(gate * n + r, j)] * x[j];
                    }
                }
                for j in 0..n {
                    v += params.r[l][(gate * n + r, j)] * prev[j];
                }
                v
            };
            let next: Vec<f64> = (0..n)
                .map(|r| {
                    let p = pre(0, r).tanh();
                    let e = sig(pre(1, r));
                    let c = if params.coupled { 1.0 - e } else { sig(pre(2, r)) };
                    p * e + prev[r] * c
                })
                .collect();
            prev = next;
        }
        prev
    }

    #[test]
    fn zero_coupled_halves_state_per_depth() {
        for depth in 1..=4 {
            let params = RhnParams::zeros(3, 2, depth, true);
            let h = vec![1.0, -2.0, 0.5];
            let out = rhn_step(&params, None, &h, &[0.3, 0.4]).unwrap();
            let scale = 0.5f64.powi(depth as i32);
            for (o, v) in out.iter().zip(&h) {
                assert!((o - scale * v).abs() < 1e-15);
            }
            let jac = rhn_jacobian(&params, None, &h, &[0.3, 0.4]).unwrap();
            assert!(jac.max_abs_diff(&Matrix::identity(3).scale(scale)).unwrap() < 1e-15);
        }
    }

    #[test]
    fn step_matches_reference() {
        for coupled in [false, true] {
            for seed in 0..5 {
                let (params, h, x) = random_instance(seed, coupled);
                let ours = rhn_step(&params, None, &h, &x).unwrap();
                let reference = reference_step(&params, &h, &x);
                for (a, b) in ours.iter().zip(&reference) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        for coupled in [false, true] {
            for seed in 0..20 {
                let (params, h, x) = random_instance(seed, coupled);
                let jac = rhn_jacobian(&params, None, &h, &x).unwrap();
                let step = |s: &[f64], x: &[f64]| rhn_step(&params, None, s, x);
                let fd = finite_diff_jacobian(step, &h, &x[..], 1e-5).unwrap();
                assert!(jac.max_abs_diff(&fd).unwrap() < 1e-6, "seed {seed} coupled {coupled}");
            }
        }
    }

    #[test]
    fn depth_one_is_single_factor() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params = RhnParams::random(4, 3, 1, false, &mut rng);
        let h = vec![0.1, -0.3, 0.2, 0.4];
        let x = vec![1.0, 0.0, -1.0];
        let jac = rhn_jacobian(&params, None, &h, &x).unwrap();
        let fd = finite_diff_jacobian(|s: &[f64], x: &[f64]| rhn_step(&params, None, s, x), &h, &x[..], 1e-6).unwrap();
        assert!(jac.max_abs_diff(&fd).unwrap() < 1e-8);
    }

    #[test]
    fn coupled_matches_explicit_complementary_carry() {
        let (coupled, h, x) = random_instance(8, true);
        let n = 8;
        // c = sigma(-y_E) = 1 - sigma(y_E)
        let negate_e = |m: &Matrix| -> Matrix {
            let mut out = Matrix::zeros(3 * n, m.cols());
            for r in 0..2 * n {
                out.row_mut(r).copy_from_slice(m.row(r));
            }
            for r in 0..n {
                let src: Vec<f64> = m.row(n + r).iter().map(|v| -v).collect();
                out.row_mut(2 * n + r).copy_from_slice(&src);
            }
            out
        };
        let explicit = RhnParams {
            w: negate_e(&coupled.w),
            r: coupled.r.iter().map(negate_e).collect(),
            b: coupled
                .b
                .iter()
                .map(|b| {
                    let mut v = b.clone();
                    v.extend(b[n..2 * n].iter().map(|x| -x));
                    v
                })
                .collect(),
            coupled: false,
        };
        let a = rhn_step(&coupled, None, &h, &x).unwrap();
        let b = rhn_step(&explicit, None, &h, &x).unwrap();
        for (u, v) in a.iter().zip(&b) {
            assert!((u - v).abs() < 1e-12);
        }
    }
}
