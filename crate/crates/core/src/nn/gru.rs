//! Gated recurrent unit kernels.
//!
//! ```text
//! r  = σ(x·W_ir + b_ir + h·W_hr + b_hr)
//! z  = σ(x·W_iz + b_iz + h·W_hz + b_hz)
//! n  = tanh(x·W_in + b_in + r ⊙ (h·W_hn + b_hn))
//! h' = (1 − z) ⊙ n + z ⊙ h
//! ```

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::graph::sigmoid;

pub(crate) struct GruWeights<'a> {
    pub w_ih: &'a Tensor,
    pub w_hh: &'a Tensor,
    pub b_ih: &'a Tensor,
    pub b_hh: &'a Tensor,
}

impl GruWeights<'_> {
    pub fn hidden(&self) -> usize {
        self.w_hh.rows()
    }

    pub fn check(&self, input_dim: usize, h0: &Tensor) -> Result<()> {
        let h = self.hidden();
        let want = |t: &Tensor, r: usize, c: usize, what: &'static str| {
            if t.shape() != (r, c) {
                Err(Error::dim(
                    what,
                    format!("{r}x{c}"),
                    format!("{}x{}", t.rows(), t.cols()),
                ))
            } else {
                Ok(())
            }
        };
        want(self.w_ih, input_dim, 3 * h, "gru input weights")?;
        want(self.w_hh, h, 3 * h, "gru recurrent weights")?;
        want(self.b_ih, 1, 3 * h, "gru input bias")?;
        want(self.b_hh, 1, 3 * h, "gru recurrent bias")?;
        want(h0, 1, h, "gru initial state")
    }
}

#[derive(Debug)]
pub(crate) struct GruCache {
    /// Per frame: r, z, n, (h·W_hn + b_hn), h_prev, each `H` wide.
    r: Tensor,
    z: Tensor,
    n: Tensor,
    hn: Tensor,
    h_prev: Tensor,
}

pub(crate) struct GruGrads {
    pub x: Tensor,
    pub w_ih: Tensor,
    pub w_hh: Tensor,
    pub b_ih: Tensor,
    pub b_hh: Tensor,
    pub h0: Tensor,
}

/// One recurrence step for a single state row. `gi` and `gh` are the `3H`
/// input and recurrent pre-activations (biases included).
#[inline]
fn cell(gi: &[f64], gh: &[f64], h_prev: &[f64], out: &mut [f64], gates: Option<(&mut [f64], &mut [f64], &mut [f64])>) {
    let h = h_prev.len();
    let mut gates = gates;
    for j in 0..h {
        let r = sigmoid(gi[j] + gh[j]);
        let z = sigmoid(gi[h + j] + gh[h + j]);
        let n = (gi[2 * h + j] + r * gh[2 * h + j]).tanh();
        out[j] = (1.0 - z) * n + z * h_prev[j];
        if let Some((rs, zs, ns)) = gates.as_mut() {
            rs[j] = r;
            zs[j] = z;
            ns[j] = n;
        }
    }
}

fn add_bias(t: &mut Tensor, bias: &Tensor) {
    let b = bias.row(0).to_vec();
    for r in 0..t.rows() {
        for (o, v) in t.row_mut(r).iter_mut().zip(&b) {
            *o += v;
        }
    }
}

pub(crate) fn forward(w: &GruWeights<'_>, x: &Tensor, h0: &Tensor, keep_cache: bool) -> (Tensor, Option<GruCache>) {
    let frames = x.rows();
    let h = w.hidden();
    let mut gi_all = x.matmul(w.w_ih);
    add_bias(&mut gi_all, w.b_ih);
    let mut out = Tensor::zeros(frames, h);
    let mut cache = keep_cache.then(|| GruCache {
        r: Tensor::zeros(frames, h),
        z: Tensor::zeros(frames, h),
        n: Tensor::zeros(frames, h),
        hn: Tensor::zeros(frames, h),
        h_prev: Tensor::zeros(frames, h),
    });
    let mut state = h0.clone();
    for f in 0..frames {
        let mut gh = state.matmul(w.w_hh);
        add_bias(&mut gh, w.b_hh);
        let mut next = vec![0.0; h];
        match cache.as_mut() {
            Some(c) => {
                c.h_prev.row_mut(f).copy_from_slice(state.row(0));
                c.hn.row_mut(f).copy_from_slice(&gh.row(0)[2 * h..]);
                let (rr, zz, nn) = (&mut c.r, &mut c.z, &mut c.n);
                let mut rs = vec![0.0; h];
                let mut zs = vec![0.0; h];
                let mut ns = vec![0.0; h];
                cell(gi_all.row(f), gh.row(0), state.row(0), &mut next, Some((&mut rs, &mut zs, &mut ns)));
                rr.row_mut(f).copy_from_slice(&rs);
                zz.row_mut(f).copy_from_slice(&zs);
                nn.row_mut(f).copy_from_slice(&ns);
            }
            None => cell(gi_all.row(f), gh.row(0), state.row(0), &mut next, None),
        }
        out.row_mut(f).copy_from_slice(&next);
        state = Tensor::row_vector(next);
    }
    (out, cache)
}

/// Backpropagation through time for [`forward`].
pub(crate) fn backward(w: &GruWeights<'_>, x: &Tensor, c: &GruCache, g_out: &Tensor) -> GruGrads {
    let frames = x.rows();
    let h = w.hidden();
    let mut d_gi = Tensor::zeros(frames, 3 * h);
    let mut d_gh = Tensor::zeros(frames, 3 * h);
    let mut dh_next = vec![0.0; h];
    for f in (0..frames).rev() {
        let (r, z, n, hn, hp) = (c.r.row(f), c.z.row(f), c.n.row(f), c.hn.row(f), c.h_prev.row(f));
        let dh: Vec<f64> = g_out.row(f).iter().zip(&dh_next).map(|(a, b)| a + b).collect();
        let mut dh_prev = vec![0.0; h];
        {
            let gi = d_gi.row_mut(f);
            for j in 0..h {
                let dn = dh[j] * (1.0 - z[j]);
                let dz = dh[j] * (hp[j] - n[j]);
                dh_prev[j] = dh[j] * z[j];
                let da_n = dn * (1.0 - n[j] * n[j]);
                let dr = da_n * hn[j];
                let da_z = dz * z[j] * (1.0 - z[j]);
                let da_r = dr * r[j] * (1.0 - r[j]);
                gi[j] = da_r;
                gi[h + j] = da_z;
                gi[2 * h + j] = da_n;
            }
        }
        {
            let gi = d_gi.row(f).to_vec();
            let gh = d_gh.row_mut(f);
            for j in 0..h {
                gh[j] = gi[j];
                gh[h + j] = gi[h + j];
                gh[2 * h + j] = gi[2 * h + j] * r[j];
            }
        }
        // dh_prev += d_gh · W_hhᵀ
        let ghrow = Tensor::row_vector(d_gh.row(f).to_vec());
        let back = ghrow.matmul_t(w.w_hh);
        for (d, b) in dh_prev.iter_mut().zip(back.row(0)) {
            *d += b;
        }
        dh_next = dh_prev;
    }
    GruGrads {
        x: d_gi.matmul_t(w.w_ih),
        w_ih: x.t_matmul(&d_gi),
        w_hh: c.h_prev.t_matmul(&d_gh),
        b_ih: Tensor::row_vector(d_gi.column_sums()),
        b_hh: Tensor::row_vector(d_gh.column_sums()),
        h0: Tensor::row_vector(dh_next),
    }
}

/// Lock-step GRU over several equal-length sequences, the state of each
/// sequence being one row of a `batch × H` matrix.
pub fn forward_batched(
    w_ih: &Tensor,
    w_hh: &Tensor,
    b_ih: &Tensor,
    b_hh: &Tensor,
    inputs: &[Tensor],
    h0: &Tensor,
) -> Result<Vec<Tensor>> {
    let weights = GruWeights {
        w_ih,
        w_hh,
        b_ih,
        b_hh,
    };
    let Some(first) = inputs.first() else {
        return Ok(Vec::new());
    };
    let frames = first.rows();
    for x in inputs {
        weights.check(x.cols(), h0)?;
        if x.rows() != frames {
            return Err(Error::dim("batched gru frames", frames, x.rows()));
        }
    }
    let h = weights.hidden();
    let b = inputs.len();
    let gi: Vec<Tensor> = inputs
        .iter()
        .map(|x| {
            let mut g = x.matmul(w_ih);
            add_bias(&mut g, b_ih);
            g
        })
        .collect();
    let mut outs: Vec<Tensor> = (0..b).map(|_| Tensor::zeros(frames, h)).collect();
    let mut state = Tensor::from_fn(b, h, |_, j| h0.get(0, j));
    for f in 0..frames {
        let mut gh = state.matmul(w_hh);
        add_bias(&mut gh, b_hh);
        let mut next = Tensor::zeros(b, h);
        for s in 0..b {
            let mut row = vec![0.0; h];
            cell(gi[s].row(f), gh.row(s), state.row(s), &mut row, None);
            next.row_mut(s).copy_from_slice(&row);
            outs[s].row_mut(f).copy_from_slice(&row);
        }
        state = next;
    }
    Ok(outs)
}
