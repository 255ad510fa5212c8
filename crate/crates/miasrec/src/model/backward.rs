//! Hand-written reverse pass for the full forward pipeline. Gradients share
//! the parameter layout, so the optimizer walks both in lockstep.

use ndarray::{s, Array1, Array2};
use rand_chacha::ChaCha8Rng;

use super::forward::{forward_cached, loss, ForwardCache, LayerCache, LnCache, Mode, COSINE_EPS};
use super::{AttentionLayer, IntentMode, ModelConfig, ModelParameters};
use crate::entmax::{entmax_grad, softmax};
use crate::error::Result;
use crate::sessions::PrefixExample;

/// Same layout as the parameters; each tensor holds dL/dtensor.
pub type Gradients = ModelParameters;

/// Gradient of x / (||x|| + eps) given the upstream gradient on the
/// normalized vector.
fn normalize_backward(x: &Array1<f64>, norm: f64, upstream: &Array1<f64>) -> Array1<f64> {
    let denom = norm + COSINE_EPS;
    if norm == 0.0 {
        return upstream.mapv(|v| v / denom);
    }
    let dot = x.dot(upstream);
    let coeff = dot / (denom * denom * norm);
    upstream.mapv(|v| v / denom) - x.mapv(|v| v * coeff)
}

fn colsum(m: &Array2<f64>) -> Array1<f64> {
    m.sum_axis(ndarray::Axis(0))
}

fn layer_norm_backward(
    cache: &LnCache,
    scale: &Array1<f64>,
    dy: &Array2<f64>,
    dscale: &mut Array1<f64>,
    doffset: &mut Array1<f64>,
) -> Array2<f64> {
    let d = dy.ncols();
    *dscale += &colsum(&(dy * &cache.xhat));
    *doffset += &colsum(dy);
    let mut dxhat = dy.clone();
    for mut row in dxhat.rows_mut() {
        row *= scale;
    }
    let mut dx = Array2::zeros(dy.raw_dim());
    for i in 0..dy.nrows() {
        let dxhat_row = dxhat.row(i);
        let xhat_row = cache.xhat.row(i);
        let m1 = dxhat_row.sum() / d as f64;
        let m2 = dxhat_row.dot(&xhat_row) / d as f64;
        let istd = cache.inv_std[i];
        for j in 0..d {
            dx[[i, j]] = istd * (dxhat_row[j] - m1 - xhat_row[j] * m2);
        }
    }
    dx
}

/// Backward through one attention block; returns the gradient w.r.t. the
/// block input.
fn layer_backward(
    cache: &LayerCache,
    layer: &AttentionLayer,
    grad: &mut AttentionLayer,
    config: &ModelConfig,
    d_out: &Array2<f64>,
) -> Array2<f64> {
    let d = config.embedding_dim;
    let heads = config.num_heads;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    // ln2 over res2 = ln1_out + ff_out
    let dres2 = layer_norm_backward(
        &cache.ln2,
        &layer.ln2_scale,
        d_out,
        &mut grad.ln2_scale,
        &mut grad.ln2_offset,
    );
    let mut dln1_out = dres2.clone();
    let mut dff_out = dres2;
    if let Some(mask) = &cache.ff_drop {
        dff_out *= mask;
    }

    grad.w_ff2 += &cache.ff_act.t().dot(&dff_out);
    grad.b_ff2 += &colsum(&dff_out);
    let dff_act = dff_out.dot(&layer.w_ff2.t());
    let dff_pre = &dff_act * &cache.ff_pre.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
    grad.w_ff1 += &cache.ln1_out.t().dot(&dff_pre);
    grad.b_ff1 += &colsum(&dff_pre);
    dln1_out += &dff_pre.dot(&layer.w_ff1.t());

    // ln1 over res1 = input + attn_out
    let dres1 = layer_norm_backward(
        &cache.ln1,
        &layer.ln1_scale,
        &dln1_out,
        &mut grad.ln1_scale,
        &mut grad.ln1_offset,
    );
    let mut dx = dres1.clone();
    let mut dattn_out = dres1;
    if let Some(mask) = &cache.attn_drop {
        dattn_out *= mask;
    }

    grad.w_output += &cache.ctx.t().dot(&dattn_out);
    grad.b_output += &colsum(&dattn_out);
    let dctx = dattn_out.dot(&layer.w_output.t());

    let mut dq = Array2::zeros(cache.q.raw_dim());
    let mut dk = Array2::zeros(cache.k.raw_dim());
    let mut dv = Array2::zeros(cache.v.raw_dim());
    for h in 0..heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let attn = &cache.attn[h];
        let dctxh = dctx.slice(cols);
        let vh = cache.v.slice(cols);
        let kh = cache.k.slice(cols);
        let qh = cache.q.slice(cols);

        let dattn_w = dctxh.dot(&vh.t());
        dv.slice_mut(cols).assign(&attn.t().dot(&dctxh));

        // softmax rows backward
        let mut dlogits = Array2::zeros(attn.raw_dim());
        for i in 0..attn.nrows() {
            let a = attn.row(i);
            let g = dattn_w.row(i);
            let dot = a.dot(&g);
            for j in 0..attn.ncols() {
                dlogits[[i, j]] = a[j] * (g[j] - dot) * scale;
            }
        }
        dq.slice_mut(cols).assign(&dlogits.dot(&kh));
        dk.slice_mut(cols).assign(&dlogits.t().dot(&qh));
    }

    grad.w_query += &cache.input.t().dot(&dq);
    grad.b_query += &colsum(&dq);
    grad.w_key += &cache.input.t().dot(&dk);
    grad.b_key += &colsum(&dk);
    grad.w_value += &cache.input.t().dot(&dv);
    grad.b_value += &colsum(&dv);

    dx += &dq.dot(&layer.w_query.t());
    dx += &dk.dot(&layer.w_key.t());
    dx += &dv.dot(&layer.w_value.t());
    dx
}

fn backward(
    cache: &ForwardCache,
    params: &ModelParameters,
    config: &ModelConfig,
    target: u32,
) -> Gradients {
    let mut grads = params.zeros_like();
    let n = params.item_count();
    let k = cache.intents.k();
    let rows = cache.o.nrows();
    let len = rows - 1;
    let d = config.embedding_dim;

    // loss -> aggregated scores
    let scaled: Vec<f64> = cache.scores.iter().map(|&v| v / config.tau).collect();
    let probs = softmax(&scaled);
    let mut dscores = vec![0.0; n];
    for i in 0..n {
        let y = if i == target as usize - 1 { 1.0 } else { 0.0 };
        dscores[i] = (probs[i] - y) / config.tau;
    }

    // aggregate -> per-intent distributions
    let mut d_per_intent = vec![vec![0.0; n]; k];
    let mean_w = (1.0 - config.beta) / k as f64;
    for i in 0..n {
        let g = dscores[i];
        d_per_intent[cache.argmax[i]][i] += config.beta * g;
        for dist in d_per_intent.iter_mut() {
            dist[i] += mean_w * g;
        }
    }

    // decode -> normalized vectors, then h and the item table
    let mut dvn: Array2<f64> = Array2::zeros((n, d));
    let mut d_o: Array2<f64> = Array2::zeros(cache.o.raw_dim());
    let mut dgamma = vec![0.0; rows];
    for (j, dper) in d_per_intent.iter().enumerate() {
        let dper = Array1::from_vec(dper.clone());
        let dhn = cache.vn.t().dot(&dper);
        for i in 0..n {
            if dper[i] != 0.0 {
                let mut row = dvn.row_mut(i);
                row += &cache.hn[j].mapv(|v| v * dper[i]).view();
            }
        }
        let sel = cache.intents.selected[j];
        let dh = normalize_backward(&cache.intents.weighted[j], cache.h_norms[j], &dhn);
        dgamma[sel] = dh.dot(&cache.o.row(sel));
        let mut row = d_o.row_mut(sel);
        row += &dh.mapv(|v| v * cache.intents.gamma[sel]).view();
    }
    for i in 0..n {
        let dv_row = normalize_backward(
            &params.item_table.row(i).to_owned(),
            cache.v_norms[i],
            &dvn.row(i).to_owned(),
        );
        let mut row = grads.item_table.row_mut(i);
        row += &dv_row.view();
    }

    // selection -> scores z (only entmax routes gradient into w and z)
    if let (IntentMode::Entmax, Some(dist)) = (config.intent_mode, cache.dist.as_ref()) {
        let dz = entmax_grad(dist, &dgamma);
        for (i, &dzi) in dz.iter().enumerate() {
            if dzi != 0.0 {
                grads.intent_weight += &cache.o.row(i).mapv(|v| v * dzi).view();
                let mut row = d_o.row_mut(i);
                row += &params.intent_weight.mapv(|v| v * dzi).view();
            }
        }
    }

    // highway: o = g .* v + (1 - g) .* c
    let dgate = &d_o * &(&cache.item_rows - &cache.encoded);
    let mut d_item = &d_o * &cache.gate;
    let mut d_enc = &d_o * &cache.gate.mapv(|g| 1.0 - g);
    let dpre = &dgate * &(&cache.gate * &cache.gate.mapv(|g| 1.0 - g));
    grads.gate_weight += &dpre.t().dot(&cache.cat);
    let dcat = dpre.dot(&params.gate_weight);
    d_item += &dcat.slice(s![.., ..d]);
    d_enc += &dcat.slice(s![.., d..]);

    // encoder stack in reverse
    let mut d_layer_out = d_enc;
    for (cache_l, (layer, grad_l)) in cache
        .layers
        .iter()
        .zip(params.layers.iter().zip(grads.layers.iter_mut()))
        .rev()
    {
        d_layer_out = layer_backward(cache_l, layer, grad_l, config, &d_layer_out);
    }
    let mut dx = d_layer_out;

    // embedding rows (x side), respecting the input dropout mask
    if let Some(mask) = &cache.input_drop {
        dx *= mask;
    }
    let example = &cache.example;
    let mean_scale = 1.0 / len as f64;
    for i in 0..len {
        let item = example.prefix[i] as usize - 1;
        {
            let mut row = grads.item_table.row_mut(item);
            row += &dx.row(i);
            row += &dx.row(len).mapv(|v| v * mean_scale).view();
        }
        if config.use_position_embedding {
            let mut row = grads.position_table.row_mut(example.positions[i] as usize);
            row += &dx.row(i);
        }
        if config.use_frequency_embedding {
            let mut row = grads.frequency_table.row_mut(example.frequencies[i] as usize);
            row += &dx.row(i);
        }
    }
    if config.use_position_embedding {
        let mut row = grads.position_table.row_mut(0);
        row += &dx.row(len);
    }
    if config.use_frequency_embedding {
        let mut row = grads.frequency_table.row_mut(0);
        row += &dx.row(len);
    }

    // item rows consumed directly by the highway (v side)
    for i in 0..len {
        let item = example.prefix[i] as usize - 1;
        let mut row = grads.item_table.row_mut(item);
        row += &d_item.row(i);
        row += &d_item.row(len).mapv(|v| v * mean_scale).view();
    }

    grads
}

/// Loss value and its gradient w.r.t. every parameter for one example.
pub fn loss_and_grad(
    example: &PrefixExample,
    params: &ModelParameters,
    config: &ModelConfig,
    mode: Mode,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<(f64, Gradients)> {
    let cache = forward_cached(example, params, config, mode, rng)?;
    let loss_value = loss(&cache.scores, example.target, config.tau);
    let grads = backward(&cache, params, config, example.target);
    Ok((loss_value, grads))
}
