//! Deliberately naive reference implementations used as ground truth for the
//! fast paths: a scalar-loop TTT layer, causal linear attention, and the
//! adapted-value recursion.
//!
//! Nothing here shares kernels with the fast path: every loop is written out
//! against flat `f64` buffers. Oracles always run in double precision.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::ttt::{InnerModel, TttConfig, TttParams, LN_EPS};

/// Deviation summary of a fast path against an oracle.
#[derive(Debug, Clone)]
pub struct OracleReport {
    pub max_abs_dev: f64,
    pub max_rel_dev: f64,
    /// `(head, token, feature)` of the worst deviation.
    pub arg_max_location: (usize, usize, usize),
    pub pass: bool,
}

/// Compares `[T x D]` outputs elementwise. `max_rel_dev` is the worst
/// absolute deviation relative to the oracle's max magnitude; `pass` checks
/// it against `tol`.
pub fn compare_outputs(got: &Tensor, oracle: &Tensor, head_dim: usize, tol: f64) -> Result<OracleReport> {
    if got.shape() != oracle.shape() {
        return Err(Error::Shape(format!(
            "compare_outputs: {:?} vs {:?}",
            got.shape(),
            oracle.shape()
        )));
    }
    let (rows, cols) = got.dims2()?;
    let scale = oracle
        .data()
        .iter()
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(1e-30);
    let mut max_abs = 0.0f64;
    let mut loc = (0, 0, 0);
    for r in 0..rows {
        for c in 0..cols {
            let dev = (got.data()[r * cols + c] - oracle.data()[r * cols + c]).abs();
            if dev > max_abs {
                max_abs = dev;
                loc = (c / head_dim.max(1), r, c % head_dim.max(1));
            }
        }
    }
    let max_rel = max_abs / scale;
    Ok(OracleReport {
        max_abs_dev: max_abs,
        max_rel_dev: max_rel,
        arg_max_location: loc,
        pass: max_rel <= tol,
    })
}

// ---------------------------------------------------------------------------
// scalar helpers
// ---------------------------------------------------------------------------

fn matvec(w: &[f64], x: &[f64], d: usize) -> Vec<f64> {
    // row convention: out[c] = sum_a x[a] w[a*d + c]
    let mut out = vec![0.0; d];
    for a in 0..d {
        let xa = x[a];
        for c in 0..d {
            out[c] += xa * w[a * d + c];
        }
    }
    out
}

fn ln_rows(u: &[f64], gamma: &[f64], beta: &[f64]) -> Vec<f64> {
    let d = u.len();
    let mean = u.iter().sum::<f64>() / d as f64;
    let var = u.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
    let inv = 1.0 / (var + LN_EPS).sqrt();
    (0..d)
        .map(|c| gamma[c] * (u[c] - mean) * inv + beta[c])
        .collect()
}

// ---------------------------------------------------------------------------
// naive TTT layer
// ---------------------------------------------------------------------------

/// Token-by-token TTT layer with every gradient and state explicitly
/// materialized: projections, separating convolutions, token-wise learning
/// rates, mini-batch partition, update and output rules.
pub fn ttt_naive(x: &Tensor, params: &TttParams, cfg: &TttConfig) -> Result<Tensor> {
    cfg.validate()?;
    let (t_len, d_model) = x.dims2()?;
    let nh = cfg.num_heads;
    let d = cfg.head_dim;
    if d_model != nh * d {
        return Err(Error::Shape(format!("ttt_naive: dim {d_model} vs {}", nh * d)));
    }
    let xs = x.data();
    let theta_kq = params.proj.theta_kq.data();
    let theta_v = params.proj.theta_v.data();

    // kq = x . theta_kq ; xv = x . theta_v
    let mut kq = vec![0.0; t_len * d_model];
    let mut xv = vec![0.0; t_len * d_model];
    for t in 0..t_len {
        for a in 0..d_model {
            let xa = xs[t * d_model + a];
            for c in 0..d_model {
                kq[t * d_model + c] += xa * theta_kq[a * d_model + c];
                xv[t * d_model + c] += xa * theta_v[a * d_model + c];
            }
        }
    }

    // causal depthwise conv separating key from query
    let conv = |kernel: &Tensor| -> Vec<f64> {
        let (k_len, _) = kernel.dims2().expect("kernel is 2-D");
        let kd = kernel.data();
        let mut out = vec![0.0; t_len * d_model];
        for t in 0..t_len {
            for tap in 0..k_len {
                let back = k_len - 1 - tap;
                if back > t {
                    continue;
                }
                for c in 0..d_model {
                    out[t * d_model + c] += kd[tap * d_model + c] * kq[(t - back) * d_model + c];
                }
            }
        }
        out
    };
    let xk = conv(&params.proj.conv1d_k);
    let xq = conv(&params.proj.conv1d_q);

    // eta[t][h] = eta_base * sigmoid(x_t . eta_proj[:, h])
    let eta_proj = params.proj.eta_proj.data();
    let eta_base = params.proj.eta_base.data()[0];
    let mut eta = vec![0.0; t_len * nh];
    for t in 0..t_len {
        for h in 0..nh {
            let mut pre = 0.0;
            for c in 0..d_model {
                pre += xs[t * d_model + c] * eta_proj[c * nh + h];
            }
            eta[t * nh + h] = eta_base / (1.0 + (-pre).exp());
        }
    }

    let b_size = cfg.effective_batch(t_len);
    let mut z = vec![0.0; t_len * d_model];

    for h in 0..nh {
        let w0 = &params.state.w0.data()[h * d * d..(h + 1) * d * d];
        let b_inner = &params.state.b_inner.data()[h * d..(h + 1) * d];
        let gamma = &params.state.ln_gamma.data()[h * d..(h + 1) * d];
        let beta = &params.state.ln_beta.data()[h * d..(h + 1) * d];
        let slice = |buf: &[f64], t: usize| -> Vec<f64> {
            (0..d).map(|c| buf[t * d_model + h * d + c]).collect()
        };

        let mut w: Vec<f64> = w0.to_vec();
        let mut start = 0;
        while start < t_len {
            let len = b_size.min(t_len - start);
            let w_entering = w.clone();
            // per-token gradients at the entering state
            let mut grads: Vec<Vec<f64>> = Vec::with_capacity(len);
            for t in start..start + len {
                let k_t = slice(&xk, t);
                let v_t = slice(&xv, t);
                let g = match cfg.inner_model {
                    InnerModel::PlainLinear => {
                        let pred = matvec(&w_entering, &k_t, d);
                        let mut g = vec![0.0; d * d];
                        for a in 0..d {
                            for c in 0..d {
                                g[a * d + c] = 2.0 * k_t[a] * (pred[c] - v_t[c]);
                            }
                        }
                        g
                    }
                    InnerModel::LnResidual => {
                        let mut u = matvec(&w_entering, &k_t, d);
                        for c in 0..d {
                            u[c] += b_inner[c];
                        }
                        let mean = u.iter().sum::<f64>() / d as f64;
                        let var =
                            u.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                        let inv = 1.0 / (var + LN_EPS).sqrt();
                        let xhat: Vec<f64> = u.iter().map(|v| (v - mean) * inv).collect();
                        let gv: Vec<f64> = (0..d)
                            .map(|c| 2.0 * (k_t[c] + gamma[c] * xhat[c] + beta[c] - v_t[c]))
                            .collect();
                        let gxh: Vec<f64> = (0..d).map(|c| gamma[c] * gv[c]).collect();
                        let m1 = gxh.iter().sum::<f64>() / d as f64;
                        let m2 =
                            gxh.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        let grow: Vec<f64> =
                            (0..d).map(|c| (gxh[c] - m1 - xhat[c] * m2) * inv).collect();
                        let mut g = vec![0.0; d * d];
                        for a in 0..d {
                            for c in 0..d {
                                g[a * d + c] = k_t[a] * grow[c];
                            }
                        }
                        g
                    }
                };
                grads.push(g);
            }
            // cumulative within-batch states and outputs
            let mut accum = vec![0.0; d * d];
            for (i, t) in (start..start + len).enumerate() {
                for j in 0..d * d {
                    accum[j] += grads[i][j];
                }
                let eta_t = eta[t * nh + h];
                let mut w_t = vec![0.0; d * d];
                for j in 0..d * d {
                    w_t[j] = w_entering[j] - eta_t * accum[j];
                }
                let q_t = slice(&xq, t);
                let lin = matvec(&w_t, &q_t, d);
                let z_t = match cfg.inner_model {
                    InnerModel::PlainLinear => lin,
                    InnerModel::LnResidual => {
                        let mut u = lin;
                        for c in 0..d {
                            u[c] += b_inner[c];
                        }
                        let v = ln_rows(&u, gamma, beta);
                        (0..d).map(|c| q_t[c] + v[c]).collect()
                    }
                };
                for c in 0..d {
                    z[t * d_model + h * d + c] = z_t[c];
                }
                if i + 1 == len {
                    w = w_t;
                }
            }
            start += len;
        }
    }
    Tensor::from_vec(&[t_len, d_model], z)
}

// ---------------------------------------------------------------------------
// theorem oracles (pre-projected single-head views)
// ---------------------------------------------------------------------------

/// Causal linear attention: `z_t = sum_{s<=t} xv_s (xk_s . xq_t)`.
pub fn linear_attention_ref(xk: &Tensor, xq: &Tensor, xv: &Tensor) -> Result<Tensor> {
    let (t_len, d) = xk.dims2()?;
    if xq.shape() != xk.shape() || xv.shape() != xk.shape() {
        return Err(Error::Shape("linear_attention_ref: shape mismatch".into()));
    }
    let mut z = vec![0.0; t_len * d];
    for t in 0..t_len {
        for s in 0..=t {
            let mut dot = 0.0;
            for c in 0..d {
                dot += xk.data()[s * d + c] * xq.data()[t * d + c];
            }
            for c in 0..d {
                z[t * d + c] += xv.data()[s * d + c] * dot;
            }
        }
    }
    Tensor::from_vec(&[t_len, d], z)
}

/// Adapted-value view of linear attention:
/// `z_t = xq_t W0 + sum_{s<=t} (xv_s - xk_s W_{s-1}) (xk_s . xq_t)` with the
/// state recursion `W_s = W_{s-1} + xk_s^T (xv_s - xk_s W_{s-1})`.
pub fn adapted_value_ref(xk: &Tensor, xq: &Tensor, xv: &Tensor, w0: Option<&Tensor>) -> Result<Tensor> {
    let (t_len, d) = xk.dims2()?;
    if xq.shape() != xk.shape() || xv.shape() != xk.shape() {
        return Err(Error::Shape("adapted_value_ref: shape mismatch".into()));
    }
    let w0: Vec<f64> = match w0 {
        Some(w) => {
            if w.shape() != [d, d] {
                return Err(Error::Shape("adapted_value_ref: w0 must be [d x d]".into()));
            }
            w.data().to_vec()
        }
        None => vec![0.0; d * d],
    };
    // adapted values, built alongside the explicit state recursion
    let mut adapted = vec![0.0; t_len * d];
    let mut w = w0.clone();
    for s in 0..t_len {
        let k_s: Vec<f64> = xk.data()[s * d..(s + 1) * d].to_vec();
        let pred = matvec(&w, &k_s, d);
        for c in 0..d {
            adapted[s * d + c] = xv.data()[s * d + c] - pred[c];
        }
        for a in 0..d {
            for c in 0..d {
                w[a * d + c] += k_s[a] * adapted[s * d + c];
            }
        }
    }
    let mut z = vec![0.0; t_len * d];
    for t in 0..t_len {
        let q_t: Vec<f64> = xq.data()[t * d..(t + 1) * d].to_vec();
        let base = matvec(&w0, &q_t, d);
        for c in 0..d {
            z[t * d + c] = base[c];
        }
        for s in 0..=t {
            let mut dot = 0.0;
            for c in 0..d {
                dot += xk.data()[s * d + c] * q_t[c];
            }
            for c in 0..d {
                z[t * d + c] += adapted[s * d + c] * dot;
            }
        }
    }
    Tensor::from_vec(&[t_len, d], z)
}
