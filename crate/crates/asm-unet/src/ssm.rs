//! Selective state-space scan and the Mamba layer built around it.
//!
//! The scan recurrence per channel c with state size N:
//!   h_t = exp(Delta_t * A) .* h_{t-1} + Delta_t * B_t * x_t,   h_0 = 0
//!   y_t = <C_t, h_t> + D_skip * x_t
//! where A = -exp(log_A) is strictly negative so exp(Delta*A) lies in
//! (0, 1). One left-to-right pass, O(s*N*M) work. The backward pass
//! recomputes the states and walks the recurrence in reverse.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn;
use crate::params::{init_normal, ParamId, ParamStore};
use crate::tape::{softplus_inv, Tape, Tensor, Unary, Vid};

/// Strides and shapes for one scan: x, delta are (s, m); b, c are (s, n);
/// log_a is (m, n); d_skip is (m).
#[derive(Debug, Clone, Copy)]
pub struct ScanDims {
    pub s: usize,
    pub m: usize,
    pub n: usize,
}

fn check_scan_shapes(
    x: &[f64],
    delta: &[f64],
    b: &[f64],
    c: &[f64],
    log_a: &[f64],
    d_skip: &[f64],
    dims: ScanDims,
) {
    let ScanDims { s, m, n } = dims;
    assert_eq!(x.len(), s * m, "scan: x shape");
    assert_eq!(delta.len(), s * m, "scan: delta shape");
    assert_eq!(b.len(), s * n, "scan: b shape");
    assert_eq!(c.len(), s * n, "scan: c shape");
    assert_eq!(log_a.len(), m * n, "scan: log_a shape");
    assert_eq!(d_skip.len(), m, "scan: d_skip shape");
}

/// Forward selective scan. Errors on non-finite inputs (numeric error);
/// shape mismatches are programming errors and panic.
#[allow(clippy::too_many_arguments)]
pub fn selective_scan(
    x: &[f64],
    delta: &[f64],
    b: &[f64],
    c: &[f64],
    log_a: &[f64],
    d_skip: &[f64],
    dims: ScanDims,
) -> Result<Vec<f64>> {
    check_scan_shapes(x, delta, b, c, log_a, d_skip, dims);
    let ScanDims { s, m, n } = dims;
    for (name, slice) in [
        ("x", x),
        ("delta", delta),
        ("b", b),
        ("c", c),
        ("log_a", log_a),
        ("d_skip", d_skip),
    ] {
        if !slice.iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite value in scan input {name}")));
        }
    }
    let mut y = vec![0.0; s * m];
    let mut h = vec![0.0; n];
    let mut neg_a = vec![0.0; n];
    for ch in 0..m {
        for (aj, &la) in neg_a.iter_mut().zip(&log_a[ch * n..(ch + 1) * n]) {
            *aj = -la.exp();
        }
        h.fill(0.0);
        let dsk = d_skip[ch];
        for t in 0..s {
            let dt = delta[t * m + ch];
            let xv = x[t * m + ch];
            let brow = &b[t * n..(t + 1) * n];
            let crow = &c[t * n..(t + 1) * n];
            let bu = dt * xv;
            let mut yt = dsk * xv;
            for j in 0..n {
                let a = (dt * neg_a[j]).exp();
                h[j] = a * h[j] + bu * brow[j];
                yt += crow[j] * h[j];
            }
            y[t * m + ch] = yt;
        }
    }
    Ok(y)
}

/// Gradients of the scan with respect to every input.
#[derive(Debug, Clone)]
pub struct ScanGrads {
    pub dx: Vec<f64>,
    pub ddelta: Vec<f64>,
    pub db: Vec<f64>,
    pub dc: Vec<f64>,
    pub dlog_a: Vec<f64>,
    pub dd_skip: Vec<f64>,
}

/// Exact reverse-pass gradients; recomputes the forward states channel by
/// channel, then runs the recurrence backwards.
#[allow(clippy::too_many_arguments)]
pub fn selective_scan_backward(
    x: &[f64],
    delta: &[f64],
    b: &[f64],
    c: &[f64],
    log_a: &[f64],
    d_skip: &[f64],
    dims: ScanDims,
    grad_y: &[f64],
) -> ScanGrads {
    check_scan_shapes(x, delta, b, c, log_a, d_skip, dims);
    let ScanDims { s, m, n } = dims;
    assert_eq!(grad_y.len(), s * m, "scan: grad_y shape");
    let mut g = ScanGrads {
        dx: vec![0.0; s * m],
        ddelta: vec![0.0; s * m],
        db: vec![0.0; s * n],
        dc: vec![0.0; s * n],
        dlog_a: vec![0.0; m * n],
        dd_skip: vec![0.0; m],
    };
    let mut hs = vec![0.0; s * n];
    let mut neg_a = vec![0.0; n];
    let mut gh = vec![0.0; n];
    for ch in 0..m {
        for (aj, &la) in neg_a.iter_mut().zip(&log_a[ch * n..(ch + 1) * n]) {
            *aj = -la.exp();
        }
        // recompute states
        {
            let mut h = vec![0.0; n];
            for t in 0..s {
                let dt = delta[t * m + ch];
                let bu = dt * x[t * m + ch];
                let brow = &b[t * n..(t + 1) * n];
                for j in 0..n {
                    let a = (dt * neg_a[j]).exp();
                    h[j] = a * h[j] + bu * brow[j];
                }
                hs[t * n..(t + 1) * n].copy_from_slice(&h);
            }
        }
        gh.fill(0.0);
        let dsk = d_skip[ch];
        for t in (0..s).rev() {
            let gy = grad_y[t * m + ch];
            let dt = delta[t * m + ch];
            let xv = x[t * m + ch];
            let brow = &b[t * n..(t + 1) * n];
            let crow = &c[t * n..(t + 1) * n];
            let hrow = &hs[t * n..(t + 1) * n];
            g.dd_skip[ch] += gy * xv;
            let mut dxv = gy * dsk;
            let mut ddt = 0.0;
            for j in 0..n {
                gh[j] += gy * crow[j];
                g.dc[t * n + j] += gy * hrow[j];
                let a = (dt * neg_a[j]).exp();
                let hprev = if t > 0 { hs[(t - 1) * n + j] } else { 0.0 };
                // via the decay factor a = exp(dt * A):
                //   d a / d dt = A * a,  d a / d log_a = dt * A * a
                ddt += gh[j] * hprev * a * neg_a[j];
                g.dlog_a[ch * n + j] += gh[j] * hprev * a * dt * neg_a[j];
                // via the input injection dt * x * b_j:
                ddt += gh[j] * xv * brow[j];
                dxv += gh[j] * dt * brow[j];
                g.db[t * n + j] += gh[j] * dt * xv;
                gh[j] *= a;
            }
            g.dx[t * m + ch] += dxv;
            g.ddelta[t * m + ch] += ddt;
        }
    }
    g
}

/// Tape op wrapping the scan kernels. Inputs: x and delta (s, m); b and c
/// (s, n); log_a (m, n); d_skip (1, m).
pub fn selective_scan_op(
    tape: &mut Tape,
    x: Vid,
    delta: Vid,
    b: Vid,
    c: Vid,
    log_a: Vid,
    d_skip: Vid,
) -> Result<Vid> {
    let (s, m) = {
        let v = tape.value(x);
        (v.rows, v.cols)
    };
    let n = tape.value(b).cols;
    let dims = ScanDims { s, m, n };
    let y = selective_scan(
        &tape.value(x).data,
        &tape.value(delta).data,
        &tape.value(b).data,
        &tape.value(c).data,
        &tape.value(log_a).data,
        &tape.value(d_skip).data,
        dims,
    )?;
    Ok(tape.push(
        Tensor::new(s, m, y),
        vec![x, delta, b, c, log_a, d_skip],
        Some(Box::new(move |ctx| {
            let g = selective_scan_backward(
                &ctx.inputs[0].data,
                &ctx.inputs[1].data,
                &ctx.inputs[2].data,
                &ctx.inputs[3].data,
                &ctx.inputs[4].data,
                &ctx.inputs[5].data,
                dims,
                &ctx.grad.data,
            );
            vec![
                Some(Tensor::new(s, m, g.dx)),
                Some(Tensor::new(s, m, g.ddelta)),
                Some(Tensor::new(s, n, g.db)),
                Some(Tensor::new(s, n, g.dc)),
                Some(Tensor::new(m, n, g.dlog_a)),
                Some(Tensor::new(1, m, g.dd_skip)),
            ]
        })),
    ))
}

// ---------------------------------------------------------------------------
// Mamba layer
// ---------------------------------------------------------------------------

/// Parameter handles for the selective-SSM core of one layer, at inner
/// width em = e * m.
#[derive(Debug, Clone)]
pub struct SsmParams {
    /// (m, 2*em): two projection streams, scan input and gate.
    pub in_proj: ParamId,
    /// (em, conv_k) depthwise causal conv weights plus (1, em) bias.
    pub conv_w: ParamId,
    pub conv_b: ParamId,
    /// (em, em) and (1, em): per-token Delta pre-activation.
    pub w_delta: ParamId,
    pub b_delta: ParamId,
    /// (em, n) each: per-token B_t and C_t projections.
    pub w_b: ParamId,
    pub w_c: ParamId,
    /// (em, n): A = -exp(log_a) per channel and state.
    pub log_a: ParamId,
    /// (1, em) skip gain.
    pub d_skip: ParamId,
    /// (em, m) output projection back to model width.
    pub out_proj: ParamId,
}

/// One pre-norm Mamba layer of model width m.
#[derive(Debug, Clone)]
pub struct MambaLayer {
    pub m: usize,
    pub n: usize,
    pub em: usize,
    pub conv_k: usize,
    pub residual: bool,
    pub norm_gamma: ParamId,
    pub ssm: SsmParams,
}

impl MambaLayer {
    /// Registers all parameters under `prefix` and initializes them:
    /// log_a rows are ln(1..=n) (spread decay rates), d_skip = 1, the Delta
    /// bias targets softplus outputs log-uniform in [1e-3, 1e-1], and the
    /// output projection starts near zero so a fresh layer is close to
    /// identity.
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        m: usize,
        n: usize,
        expand: usize,
        conv_k: usize,
    ) -> Self {
        assert!(m >= 1 && n >= 1 && expand >= 1 && conv_k >= 1);
        let em = expand * m;
        let norm_gamma = store.register(&format!("{prefix}.norm_gamma"), Tensor::full(1, m, 1.0));
        let in_proj = store.register(
            &format!("{prefix}.in_proj"),
            init_normal(rng, m, 2 * em, (1.0 / m as f64).sqrt()),
        );
        let conv_w = store.register(
            &format!("{prefix}.conv_w"),
            init_normal(rng, em, conv_k, (1.0 / conv_k as f64).sqrt()),
        );
        let conv_b = store.register(&format!("{prefix}.conv_b"), Tensor::zeros(1, em));
        let w_delta = store.register(
            &format!("{prefix}.w_delta"),
            init_normal(rng, em, em, (1.0 / em as f64).sqrt()),
        );
        let b_delta = {
            let mut t = Tensor::zeros(1, em);
            let (lo, hi) = (1e-3f64.ln(), 1e-1f64.ln());
            for v in t.data.iter_mut() {
                let dt0 = rng.random_range(lo..hi).exp();
                *v = softplus_inv(dt0);
            }
            store.register(&format!("{prefix}.b_delta"), t)
        };
        let w_b = store.register(
            &format!("{prefix}.w_b"),
            init_normal(rng, em, n, (1.0 / em as f64).sqrt()),
        );
        let w_c = store.register(
            &format!("{prefix}.w_c"),
            init_normal(rng, em, n, (1.0 / em as f64).sqrt()),
        );
        let log_a = {
            let mut t = Tensor::zeros(em, n);
            for ch in 0..em {
                for j in 0..n {
                    t.data[ch * n + j] = ((j + 1) as f64).ln();
                }
            }
            store.register(&format!("{prefix}.log_a"), t)
        };
        let d_skip = store.register(&format!("{prefix}.d_skip"), Tensor::full(1, em, 1.0));
        let out_proj =
            store.register(&format!("{prefix}.out_proj"), init_normal(rng, em, m, 0.02));
        MambaLayer {
            m,
            n,
            em,
            conv_k,
            residual: true,
            norm_gamma,
            ssm: SsmParams {
                in_proj,
                conv_w,
                conv_b,
                w_delta,
                b_delta,
                w_b,
                w_c,
                log_a,
                d_skip,
                out_proj,
            },
        }
    }

    /// Pre-norm -> two projection streams -> causal depthwise conv + SiLU
    /// on the scan stream -> data-dependent Delta/B/C -> selective scan ->
    /// SiLU gate -> output projection -> residual.
    pub fn forward(&self, tape: &mut Tape, leaves: &[Vid], x: Vid) -> Result<Vid> {
        let xv = tape.value(x);
        assert_eq!(xv.cols, self.m, "mamba_layer: width mismatch");
        let em = self.em;
        let xn = nn::rms_norm(tape, x, leaves[self.norm_gamma]);
        let proj = tape.matmul(xn, leaves[self.ssm.in_proj]);
        let stream = tape.slice_cols(proj, 0, em);
        let gate_raw = tape.slice_cols(proj, em, 2 * em);
        let conv =
            nn::causal_conv1d(tape, stream, leaves[self.ssm.conv_w], leaves[self.ssm.conv_b]);
        let u = tape.unary(conv, Unary::Silu);
        let delta_lin = tape.matmul(u, leaves[self.ssm.w_delta]);
        let delta_raw = tape.add_bias(delta_lin, leaves[self.ssm.b_delta]);
        let delta = tape.unary(delta_raw, Unary::Softplus);
        let b = tape.matmul(u, leaves[self.ssm.w_b]);
        let c = tape.matmul(u, leaves[self.ssm.w_c]);
        let y = selective_scan_op(
            tape,
            u,
            delta,
            b,
            c,
            leaves[self.ssm.log_a],
            leaves[self.ssm.d_skip],
        )?;
        let gate = tape.unary(gate_raw, Unary::Silu);
        let gated = tape.mul(y, gate);
        let out = tape.matmul(gated, leaves[self.ssm.out_proj]);
        Ok(if self.residual { tape.add(out, x) } else { out })
    }
}

/// A stack of Mamba layers at a fixed width.
#[derive(Debug, Clone)]
pub struct MambaStack {
    pub layers: Vec<MambaLayer>,
}

impl MambaStack {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        m: usize,
        depth: usize,
        n: usize,
        expand: usize,
        conv_k: usize,
    ) -> Self {
        let layers = (0..depth)
            .map(|i| MambaLayer::new(store, rng, &format!("{prefix}.layer{i}"), m, n, expand, conv_k))
            .collect();
        MambaStack { layers }
    }

    pub fn forward(&self, tape: &mut Tape, leaves: &[Vid], x: Vid) -> Result<Vid> {
        let mut cur = x;
        for layer in &self.layers {
            cur = layer.forward(tape, leaves, cur)?;
        }
        Ok(cur)
    }
}

// ---------------------------------------------------------------------------
// timing
// ---------------------------------------------------------------------------

/// Accepted median-time ratio when the sequence length doubles: wide
/// enough for allocator and cache noise, tight enough to reject
/// quadratic growth (ratio 4).
pub const DOUBLING_RATIO_BAND: (f64, f64) = (1.6, 2.6);

/// One bench measurement: sequence length, calibrated repeats per batch,
/// and the median per-call seconds over five batches.
#[derive(Debug, Clone)]
pub struct BenchRow {
    pub s: usize,
    pub reps: usize,
    pub median_secs: f64,
}

/// Times the forward scan across sequence lengths at fixed channel and
/// state sizes (m = 16, n = 8). Each batch repeats the call until it
/// costs at least 20 ms of wall time so short sequences are not timing
/// noise; the reported figure is the median of five batches.
pub fn bench_scan(lengths: &[usize]) -> Result<Vec<BenchRow>> {
    use rand::SeedableRng;
    use std::time::Instant;

    if lengths.is_empty() {
        return Err(Error::invalid("bench-scan needs at least one length"));
    }
    let (m, n) = (16, 8);
    let mut out = Vec::with_capacity(lengths.len());
    for &s in lengths {
        if s == 0 {
            return Err(Error::invalid("bench-scan lengths must be >= 1"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(s as u64 ^ 0x6265_6e63);
        let mut fill = |len: usize, lo: f64, hi: f64| -> Vec<f64> {
            (0..len).map(|_| rng.random_range(lo..hi)).collect()
        };
        let x = fill(s * m, -1.0, 1.0);
        let delta = fill(s * m, 0.05, 0.5);
        let b = fill(s * n, -1.0, 1.0);
        let c = fill(s * n, -1.0, 1.0);
        let log_a = fill(m * n, -0.5, 0.5);
        let d_skip = fill(m, -1.0, 1.0);
        let dims = ScanDims { s, m, n };
        let once = || -> f64 {
            let y = selective_scan(&x, &delta, &b, &c, &log_a, &d_skip, dims)
                .expect("finite bench inputs");
            y[s * m - 1]
        };

        // calibrate: enough repeats that a batch is at least 20 ms
        let mut reps = 1usize;
        loop {
            let t0 = Instant::now();
            let mut sink = 0.0;
            for _ in 0..reps {
                sink += once();
            }
            std::hint::black_box(sink);
            let secs = t0.elapsed().as_secs_f64();
            if secs >= 0.02 {
                break;
            }
            let grow = if secs <= 0.0 { 16.0 } else { (0.025 / secs).max(2.0) };
            reps = ((reps as f64 * grow).ceil() as usize).max(reps + 1);
        }

        let mut per_call = [0.0f64; 5];
        for slot in per_call.iter_mut() {
            let t0 = Instant::now();
            let mut sink = 0.0;
            for _ in 0..reps {
                sink += once();
            }
            std::hint::black_box(sink);
            *slot = t0.elapsed().as_secs_f64() / reps as f64;
        }
        per_call.sort_by(f64::total_cmp);
        out.push(BenchRow { s, reps, median_secs: per_call[2] });
    }
    Ok(out)
}

/// `s,reps,median_seconds,ratio_vs_prev` rows; the first ratio cell is
/// empty.
pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from("s,reps,median_seconds,ratio_vs_prev\n");
    for (i, r) in rows.iter().enumerate() {
        let ratio = if i == 0 {
            String::new()
        } else {
            format!("{:.4}", r.median_secs / rows[i - 1].median_secs)
        };
        out.push_str(&format!("{},{},{:.9},{}\n", r.s, r.reps, r.median_secs, ratio));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_input, check_params};
    use rand::SeedableRng;

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn scan_scalar_geometric_series() {
        // A = -1, Delta = ln 2 so the decay factor is exactly 1/2;
        // x = 1, B = C = 1, D = 0 gives y = ln2 * [1, 1.5, 1.75]
        let dims = ScanDims { s: 3, m: 1, n: 1 };
        let ln2 = std::f64::consts::LN_2;
        let y = selective_scan(
            &[1.0, 1.0, 1.0],
            &[ln2, ln2, ln2],
            &[1.0, 1.0, 1.0],
            &[1.0, 1.0, 1.0],
            &[0.0],
            &[0.0],
            dims,
        )
        .unwrap();
        let want = [ln2, 1.5 * ln2, 1.75 * ln2];
        for (a, b) in y.iter().zip(want) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn scan_single_step_closed_form() {
        // s = 1: y = <C, Delta*B*x> + D*x per channel
        let dims = ScanDims { s: 1, m: 2, n: 3 };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_vec(&mut rng, 2);
        let delta: Vec<f64> = (0..2).map(|_| rng.random_range(0.01..1.0)).collect();
        let b = rand_vec(&mut rng, 3);
        let c = rand_vec(&mut rng, 3);
        let log_a = rand_vec(&mut rng, 6);
        let d_skip = rand_vec(&mut rng, 2);
        let y = selective_scan(&x, &delta, &b, &c, &log_a, &d_skip, dims).unwrap();
        for ch in 0..2 {
            let mut want = d_skip[ch] * x[ch];
            for j in 0..3 {
                want += c[j] * delta[ch] * b[j] * x[ch];
            }
            assert!((y[ch] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn scan_matches_quadratic_unroll_oracle() {
        // y_t = D x_t + sum_{tau<=t} <C_t, (prod_{r=tau+1..t} a_r) .* (Delta_tau B_tau x_tau)>
        let dims = ScanDims { s: 12, m: 3, n: 4 };
        let ScanDims { s, m, n } = dims;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_vec(&mut rng, s * m);
        let delta: Vec<f64> = (0..s * m).map(|_| rng.random_range(0.01..0.8)).collect();
        let b = rand_vec(&mut rng, s * n);
        let c = rand_vec(&mut rng, s * n);
        let log_a = rand_vec(&mut rng, m * n);
        let d_skip = rand_vec(&mut rng, m);
        let y = selective_scan(&x, &delta, &b, &c, &log_a, &d_skip, dims).unwrap();
        for ch in 0..m {
            for t in 0..s {
                let mut want = d_skip[ch] * x[t * m + ch];
                for tau in 0..=t {
                    for j in 0..n {
                        let mut decay = 1.0;
                        for r in tau + 1..=t {
                            decay *= (delta[r * m + ch] * -(log_a[ch * n + j].exp())).exp();
                        }
                        want += c[t * n + j]
                            * decay
                            * delta[tau * m + ch]
                            * b[tau * n + j]
                            * x[tau * m + ch];
                    }
                }
                assert!(
                    (y[t * m + ch] - want).abs() < 1e-10,
                    "ch {ch} t {t}: {} vs {want}",
                    y[t * m + ch]
                );
            }
        }
    }

    #[test]
    fn scan_linear_in_x_with_fixed_coefficients() {
        let dims = ScanDims { s: 6, m: 2, n: 2 };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_vec(&mut rng, 12);
        let delta: Vec<f64> = (0..12).map(|_| rng.random_range(0.01..1.0)).collect();
        let b = rand_vec(&mut rng, 12);
        let c = rand_vec(&mut rng, 12);
        let log_a = rand_vec(&mut rng, 4);
        let d_skip = rand_vec(&mut rng, 2);
        let y1 = selective_scan(&x, &delta, &b, &c, &log_a, &d_skip, dims).unwrap();
        let x2: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        let y2 = selective_scan(&x2, &delta, &b, &c, &log_a, &d_skip, dims).unwrap();
        for (a, bb) in y1.iter().zip(&y2) {
            assert_eq!(2.0 * a, *bb, "doubling x must exactly double y");
        }
    }

    #[test]
    fn scan_bounded_for_long_constant_input() {
        // exp(Delta*A) in (0,1) keeps the state on a geometric leash
        let dims = ScanDims { s: 256, m: 1, n: 2 };
        let x = vec![1.0; 256];
        let delta = vec![0.5; 256];
        let b = vec![1.0; 512];
        let c = vec![1.0; 512];
        let log_a = vec![0.0, 0.5];
        let d_skip = vec![0.0];
        let y = selective_scan(&x, &delta, &b, &c, &log_a, &d_skip, dims).unwrap();
        // per state j: h_inf = 0.5 / (1 - exp(-0.5*exp(log_a_j)))
        let bound: f64 = (0..2)
            .map(|j| 0.5 / (1.0 - (-0.5 * (log_a[j] as f64).exp()).exp()))
            .sum::<f64>()
            + 1e-9;
        assert!(y.iter().all(|v| v.is_finite() && v.abs() <= bound));
    }

    #[test]
    fn scan_rejects_non_finite_input() {
        let dims = ScanDims { s: 1, m: 1, n: 1 };
        let r = selective_scan(&[f64::NAN], &[0.1], &[1.0], &[1.0], &[0.0], &[0.0], dims);
        assert!(matches!(r, Err(Error::Numeric(_))));
        let r2 =
            selective_scan(&[1.0], &[0.1], &[1.0], &[1.0], &[f64::INFINITY], &[0.0], dims);
        assert!(matches!(r2, Err(Error::Numeric(_))));
    }

    #[test]
    fn scan_backward_zero_grad_gives_zero() {
        let dims = ScanDims { s: 4, m: 2, n: 2 };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_vec(&mut rng, 8);
        let delta: Vec<f64> = (0..8).map(|_| rng.random_range(0.01..1.0)).collect();
        let b = rand_vec(&mut rng, 8);
        let c = rand_vec(&mut rng, 8);
        let log_a = rand_vec(&mut rng, 4);
        let d_skip = rand_vec(&mut rng, 2);
        let g = selective_scan_backward(&x, &delta, &b, &c, &log_a, &d_skip, dims, &vec![0.0; 8]);
        assert!(g.dx.iter().all(|&v| v == 0.0));
        assert!(g.ddelta.iter().all(|&v| v == 0.0));
        assert!(g.db.iter().all(|&v| v == 0.0));
        assert!(g.dc.iter().all(|&v| v == 0.0));
        assert!(g.dlog_a.iter().all(|&v| v == 0.0));
        assert!(g.dd_skip.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn scan_backward_d_skip_closed_form() {
        let dims = ScanDims { s: 5, m: 2, n: 3 };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_vec(&mut rng, 10);
        let delta: Vec<f64> = (0..10).map(|_| rng.random_range(0.01..1.0)).collect();
        let b = rand_vec(&mut rng, 15);
        let c = rand_vec(&mut rng, 15);
        let log_a = rand_vec(&mut rng, 6);
        let d_skip = rand_vec(&mut rng, 2);
        let gy = rand_vec(&mut rng, 10);
        let g = selective_scan_backward(&x, &delta, &b, &c, &log_a, &d_skip, dims, &gy);
        for ch in 0..2 {
            let want: f64 = (0..5).map(|t| gy[t * 2 + ch] * x[t * 2 + ch]).sum();
            assert!((g.dd_skip[ch] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn scan_backward_matches_finite_differences() {
        let dims = ScanDims { s: 8, m: 3, n: 4 };
        let ScanDims { s, m, n } = dims;
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = rand_vec(&mut rng, s * m);
        let delta: Vec<f64> = (0..s * m).map(|_| rng.random_range(0.05..0.9)).collect();
        let b = rand_vec(&mut rng, s * n);
        let c = rand_vec(&mut rng, s * n);
        let log_a = rand_vec(&mut rng, m * n);
        let d_skip = rand_vec(&mut rng, m);
        let weights = rand_vec(&mut rng, s * m);
        let loss = |xx: &[f64], dd: &[f64], bb: &[f64], cc: &[f64], la: &[f64], ds: &[f64]| {
            selective_scan(xx, dd, bb, cc, la, ds, dims)
                .unwrap()
                .iter()
                .zip(&weights)
                .map(|(a, w)| a * w)
                .sum::<f64>()
        };
        let g = selective_scan_backward(&x, &delta, &b, &c, &log_a, &d_skip, dims, &weights);
        let step = 1e-5;
        let checks = [
            check_input(&x, step, &g.dx, |v| loss(v, &delta, &b, &c, &log_a, &d_skip)),
            check_input(&delta, step, &g.ddelta, |v| loss(&x, v, &b, &c, &log_a, &d_skip)),
            check_input(&b, step, &g.db, |v| loss(&x, &delta, v, &c, &log_a, &d_skip)),
            check_input(&c, step, &g.dc, |v| loss(&x, &delta, &b, v, &log_a, &d_skip)),
            check_input(&log_a, step, &g.dlog_a, |v| loss(&x, &delta, &b, &c, v, &d_skip)),
            check_input(&d_skip, step, &g.dd_skip, |v| loss(&x, &delta, &b, &c, &log_a, v)),
        ];
        for (i, e) in checks.iter().enumerate() {
            assert!(*e < 1e-6, "input group {i} rel err {e}");
        }
    }

    fn layer_fixture(m: usize, seed: u64) -> (ParamStore, MambaLayer) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layer = MambaLayer::new(&mut store, &mut rng, "test", m, 2, 2, 4);
        (store, layer)
    }

    #[test]
    fn mamba_layer_zero_out_proj_is_identity() {
        let (mut store, layer) = layer_fixture(3, 7);
        store.value_mut(layer.ssm.out_proj).data.fill(0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x0 = rand_vec(&mut rng, 5 * 3);
        let mut tape = Tape::new();
        let leaves = store.leaves(&mut tape);
        let x = tape.leaf(Tensor::new(5, 3, x0.clone()));
        let y = layer.forward(&mut tape, &leaves, x).unwrap();
        assert_eq!(tape.value(y).data, x0, "residual-only layer must be exact identity");
    }

    #[test]
    fn mamba_layer_preserves_shape_and_is_deterministic() {
        let (store, layer) = layer_fixture(4, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x0 = rand_vec(&mut rng, 6 * 4);
        let run = || {
            let mut tape = Tape::new();
            let leaves = store.leaves(&mut tape);
            let x = tape.leaf(Tensor::new(6, 4, x0.clone()));
            let y = layer.forward(&mut tape, &leaves, x).unwrap();
            tape.value(y).data.clone()
        };
        let y1 = run();
        let y2 = run();
        assert_eq!(y1.len(), 24);
        assert_eq!(y1, y2);
    }

    #[test]
    fn mamba_layer_is_causal() {
        let (store, layer) = layer_fixture(3, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let s = 7;
        let x0 = rand_vec(&mut rng, s * 3);
        let run = |xd: &[f64]| {
            let mut tape = Tape::new();
            let leaves = store.leaves(&mut tape);
            let x = tape.leaf(Tensor::new(s, 3, xd.to_vec()));
            let y = layer.forward(&mut tape, &leaves, x).unwrap();
            tape.value(y).data.clone()
        };
        let base = run(&x0);
        let t_perturb = 4;
        let mut xp = x0.clone();
        for j in 0..3 {
            xp[t_perturb * 3 + j] += 0.61;
        }
        let pert = run(&xp);
        for t in 0..t_perturb {
            for j in 0..3 {
                assert_eq!(base[t * 3 + j], pert[t * 3 + j], "future leaked into t={t}");
            }
        }
    }

    #[test]
    fn mamba_layer_survives_extreme_delta_bias() {
        // softplus keeps Delta positive even for a very negative bias
        let (mut store, layer) = layer_fixture(2, 13);
        store.value_mut(layer.ssm.b_delta).data.fill(-40.0);
        let mut tape = Tape::new();
        let leaves = store.leaves(&mut tape);
        let x = tape.leaf(Tensor::new(4, 2, vec![0.3; 8]));
        let y = layer.forward(&mut tape, &leaves, x).unwrap();
        assert!(tape.value(y).is_finite());
    }

    #[test]
    fn mamba_layer_all_params_match_finite_differences() {
        let (store, layer) = layer_fixture(3, 14);
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let s = 5;
        let x0 = rand_vec(&mut rng, s * 3);
        let weights = rand_vec(&mut rng, s * 3);
        let report = check_params("mamba_layer", &store, 1e-6, 1e-5, |tape, leaves| {
            let x = tape.leaf(Tensor::new(s, 3, x0.clone()));
            let y = layer.forward(tape, leaves, x).unwrap();
            let w = tape.leaf(Tensor::new(s, 3, weights.clone()));
            let p = tape.mul(y, w);
            tape.sum_all(p)
        });
        assert!(report.passed(), "worst rel err {}", report.worst());
    }

    #[test]
    fn mamba_stack_composes() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let stack = MambaStack::new(&mut store, &mut rng, "stk", 3, 2, 2, 2, 4);
        assert_eq!(stack.layers.len(), 2);
        let mut tape = Tape::new();
        let leaves = store.leaves(&mut tape);
        let x = tape.leaf(Tensor::new(4, 3, rand_vec(&mut rng, 12)));
        let y = stack.forward(&mut tape, &leaves, x).unwrap();
        assert_eq!((tape.value(y).rows, tape.value(y).cols), (4, 3));
    }
}
