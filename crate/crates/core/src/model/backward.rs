use ndarray::{s, Array1, Array2, ArrayView2, Axis};

use super::forward::{gelu_grad, ForwardTrace, LayerNormCache};
use super::{ModelParams, Scalar, Weights};
use crate::error::{Error, Result};

fn layer_norm_backward<T: Scalar>(
    dy: &Array2<T>,
    cache: &LayerNormCache<T>,
    gain: &Array1<T>,
    grads: Option<(&mut Array1<T>, &mut Array1<T>)>,
) -> Array2<T> {
    if let Some((dg, db)) = grads {
        *dg += &(dy * &cache.xhat).sum_axis(Axis(0));
        *db += &dy.sum_axis(Axis(0));
    }
    let d = T::from_f64(dy.ncols() as f64);
    let mut dx = dy * gain;
    for ((mut row, xhat), &inv) in dx.axis_iter_mut(Axis(0)).zip(cache.xhat.rows()).zip(cache.inv_std.iter()) {
        let mean = row.sum() / d;
        let proj = row.iter().zip(xhat).fold(T::zero(), |acc, (&a, &b)| acc + a * b) / d;
        for (v, &xh) in row.iter_mut().zip(xhat) {
            *v = inv * (*v - mean - xh * proj);
        }
    }
    dx
}

fn sum_rows<T: Scalar>(m: &Array2<T>) -> Array1<T> {
    m.sum_axis(Axis(0))
}

/// Backpropagates `dlogits` (shaped like `trace.logits`) to the input rows,
/// returning dLoss/dEmbeddedInput.rows (n × d).
///
/// When `grads` is given, parameter gradients are added into it, including
/// token-embedding gradients for every non-placeholder position.
pub fn backward<T: Scalar>(
    params: &ModelParams<T>,
    trace: &ForwardTrace<T>,
    dlogits: ArrayView2<'_, T>,
    mut grads: Option<&mut Weights<T>>,
) -> Result<Array2<T>> {
    let w = params.weights();
    let c = &w.config;
    if dlogits.dim() != trace.logits.dim() {
        return Err(Error::Shape(format!(
            "upstream gradient {:?} does not match logits {:?}",
            dlogits.dim(),
            trace.logits.dim()
        )));
    }
    if let Some(g) = grads.as_deref() {
        if g.config != *c {
            return Err(Error::Shape("gradient buffer shaped for a different model".into()));
        }
    }
    let n = trace.seq_len();
    let hd = c.head_dim();
    let scale = T::from_f64(1.0 / (hd as f64).sqrt());
    let off = trace.logit_row_offset;

    let mut dh = Array2::zeros((n, c.d_model));
    dh.slice_mut(s![off.., ..]).assign(&dlogits.dot(&w.unembedding.t()));
    if let Some(g) = grads.as_deref_mut() {
        g.unembedding += &trace.hidden.slice(s![off.., ..]).t().dot(&dlogits);
    }
    let mut dx = layer_norm_backward(
        &dh,
        &trace.lnf,
        &w.lnf_gain,
        grads.as_deref_mut().map(|g| (&mut g.lnf_gain, &mut g.lnf_bias)),
    );

    for (li, (l, cache)) in w.layers.iter().zip(&trace.blocks).enumerate().rev() {
        let mut lg = grads.as_deref_mut().map(|g| &mut g.layers[li]);

        // MLP branch
        let d_act = dx.dot(&l.w_down.t());
        let mut d_up = d_act;
        d_up.zip_mut_with(&cache.up, |g, &u| *g = *g * gelu_grad(u));
        if let Some(g) = lg.as_deref_mut() {
            g.w_down += &cache.act.t().dot(&dx);
            g.b_down += &sum_rows(&dx);
            g.w_up += &cache.b.t().dot(&d_up);
            g.b_up += &sum_rows(&d_up);
        }
        let db = d_up.dot(&l.w_up.t());
        dx += &layer_norm_backward(
            &db,
            &cache.ln2,
            &l.ln2_gain,
            lg.as_deref_mut().map(|g| (&mut g.ln2_gain, &mut g.ln2_bias)),
        );

        // attention branch
        let d_concat = dx.dot(&l.w_o.t());
        let mut dq = Array2::zeros((n, c.d_model));
        let mut dk = Array2::zeros((n, c.d_model));
        let mut dv = Array2::zeros((n, c.d_model));
        for (h, p) in cache.probs.iter().enumerate() {
            let cols = s![.., h * hd..(h + 1) * hd];
            let d_out = d_concat.slice(cols);
            let mut ds = d_out.dot(&cache.v.slice(cols).t());
            dv.slice_mut(cols).assign(&p.t().dot(&d_out));
            for (mut row, prow) in ds.axis_iter_mut(Axis(0)).zip(p.rows()) {
                let dot = row.iter().zip(prow).fold(T::zero(), |acc, (&a, &b)| acc + a * b);
                for (v, &pv) in row.iter_mut().zip(prow) {
                    *v = pv * (*v - dot) * scale;
                }
            }
            dq.slice_mut(cols).assign(&ds.dot(&cache.k.slice(cols)));
            dk.slice_mut(cols).assign(&ds.t().dot(&cache.q.slice(cols)));
        }
        if let Some(g) = lg.as_deref_mut() {
            g.w_o += &cache.attn_concat.t().dot(&dx);
            g.w_q += &cache.a.t().dot(&dq);
            g.w_k += &cache.a.t().dot(&dk);
            g.w_v += &cache.a.t().dot(&dv);
        }
        let da = dq.dot(&l.w_q.t()) + dk.dot(&l.w_k.t()) + dv.dot(&l.w_v.t());
        dx += &layer_norm_backward(
            &da,
            &cache.ln1,
            &l.ln1_gain,
            lg.map(|g| (&mut g.ln1_gain, &mut g.ln1_bias)),
        );
    }

    if let Some(g) = grads {
        let mut pos = g.positional_embedding.slice_mut(s![..n, ..]);
        pos += &dx;
        for (i, &id) in trace.ids.iter().enumerate() {
            if trace.trigger_positions.contains(&i) {
                continue;
            }
            let mut row = g.token_embedding.row_mut(id as usize);
            row += &dx.row(i);
        }
    }
    Ok(dx)
}

/// Gradient with respect to the trigger rows only (k × d, in placeholder order).
/// The model itself receives no update.
pub fn backward_to_triggers<T: Scalar>(
    params: &ModelParams<T>,
    trace: &ForwardTrace<T>,
    dlogits: ArrayView2<'_, T>,
    positions: &[usize],
) -> Result<Array2<T>> {
    if positions != trace.trigger_positions.as_slice() {
        return Err(Error::Shape(format!(
            "trigger positions {positions:?} differ from the traced {:?}",
            trace.trigger_positions
        )));
    }
    let dx = backward(params, trace, dlogits, None)?;
    Ok(dx.select(Axis(0), positions))
}
