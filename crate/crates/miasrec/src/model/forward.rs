//! Forward computation: embeddings, bidirectional self-attention, highway
//! gate, sparse intent selection, cosine decoding, pooled aggregation, and
//! the temperature-scaled cross-entropy loss.

use ndarray::{s, Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{IntentMode, ModelConfig, ModelParameters};
use crate::entmax::{entmax, SparseDistribution};
use crate::error::{Error, Result};
use crate::sessions::PrefixExample;

pub(crate) const COSINE_EPS: f64 = 1e-12;
pub(crate) const LN_EPS: f64 = 1e-8;
const MASKED_LOGIT: f64 = -1e30;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// The entmax weights, the surviving indices, and the weighted representations.
#[derive(Debug, Clone)]
pub struct IntentSet {
    /// weight per row of O ({items..., mean}); zero entries were pruned
    pub gamma: Vec<f64>,
    pub selected: Vec<usize>,
    /// h_i = gamma_i * o_i for each selected row
    pub weighted: Vec<Array1<f64>>,
}

impl IntentSet {
    pub fn k(&self) -> usize {
        self.selected.len()
    }
}

pub(crate) struct LnCache {
    pub xhat: Array2<f64>,
    pub inv_std: Vec<f64>,
}

pub(crate) struct LayerCache {
    pub input: Array2<f64>,
    pub q: Array2<f64>,
    pub k: Array2<f64>,
    pub v: Array2<f64>,
    /// softmax attention weights, one R x R matrix per head
    pub attn: Vec<Array2<f64>>,
    pub ctx: Array2<f64>,
    pub attn_drop: Option<Array2<f64>>,
    pub ln1: LnCache,
    pub ln1_out: Array2<f64>,
    pub ff_pre: Array2<f64>,
    pub ff_act: Array2<f64>,
    pub ff_drop: Option<Array2<f64>>,
    pub ln2: LnCache,
    pub output: Array2<f64>,
}

pub(crate) struct ForwardCache {
    pub example: PrefixExample,
    pub input_drop: Option<Array2<f64>>,
    pub layers: Vec<LayerCache>,
    pub encoded: Array2<f64>,
    pub item_rows: Array2<f64>,
    pub cat: Array2<f64>,
    pub gate: Array2<f64>,
    pub o: Array2<f64>,
    pub dist: Option<SparseDistribution>,
    pub intents: IntentSet,
    pub h_norms: Vec<f64>,
    pub hn: Vec<Array1<f64>>,
    pub v_norms: Vec<f64>,
    pub vn: Array2<f64>,
    pub argmax: Vec<usize>,
    pub scores: Vec<f64>,
}

fn dropout_mask(rows: usize, cols: usize, rate: f64, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let keep = 1.0 - rate;
    Array2::from_shape_fn((rows, cols), |_| {
        if rng.gen::<f64>() < keep {
            1.0 / keep
        } else {
            0.0
        }
    })
}

/// Item rows used both as encoder input (plus position/frequency terms) and
/// as the highway `v_i` side: rows 0..|s| are V[prefix_i], the last row is the
/// mean item embedding.
fn build_item_rows(
    example: &PrefixExample,
    params: &ModelParameters,
    config: &ModelConfig,
) -> Result<Array2<f64>> {
    let len = example.prefix.len();
    if len == 0 || len > config.max_len {
        return Err(Error::Model(format!(
            "prefix length {len} outside [1, {}]",
            config.max_len
        )));
    }
    let d = config.embedding_dim;
    let n = params.item_count();
    let mut rows = Array2::zeros((len + 1, d));
    for (i, &item) in example.prefix.iter().enumerate() {
        if item == 0 || item as usize > n {
            return Err(Error::Model(format!("item index {item} outside [1, {n}]")));
        }
        let emb = params.item_table.row(item as usize - 1);
        rows.row_mut(i).assign(&emb);
        let mean_scale = 1.0 / len as f64;
        let mut mean_row = rows.row_mut(len);
        mean_row += &emb.mapv(|v| v * mean_scale).view();
    }
    Ok(rows)
}

fn embed_cached(
    example: &PrefixExample,
    params: &ModelParameters,
    config: &ModelConfig,
    drop: Option<&Array2<f64>>,
) -> Result<(Array2<f64>, Array2<f64>)> {
    let item_rows = build_item_rows(example, params, config)?;
    let len = example.prefix.len();
    let mut x = item_rows.clone();
    for i in 0..len {
        let pos = example.positions[i] as usize;
        let freq = example.frequencies[i] as usize;
        if pos > config.max_len || freq > config.max_len {
            return Err(Error::Model(format!(
                "position {pos} or frequency {freq} outside table range [0, {}]",
                config.max_len
            )));
        }
        if config.use_position_embedding {
            let mut row = x.row_mut(i);
            row += &params.position_table.row(pos);
        }
        if config.use_frequency_embedding {
            let mut row = x.row_mut(i);
            row += &params.frequency_table.row(freq);
        }
    }
    // the mean token uses the reserved row 0 of both tables
    if config.use_position_embedding {
        let mut row = x.row_mut(len);
        row += &params.position_table.row(0);
    }
    if config.use_frequency_embedding {
        let mut row = x.row_mut(len);
        row += &params.frequency_table.row(0);
    }
    if let Some(mask) = drop {
        x *= mask;
    }
    Ok((x, item_rows))
}

/// Model input rows x_1..x_{|s|}, x_m (no dropout; training applies it
/// inside `forward`).
pub fn embed_inputs(
    example: &PrefixExample,
    params: &ModelParameters,
    config: &ModelConfig,
) -> Result<Array2<f64>> {
    embed_cached(example, params, config, None).map(|(x, _)| x)
}

fn add_bias(m: &mut Array2<f64>, b: &Array1<f64>) {
    for mut row in m.rows_mut() {
        row += b;
    }
}

fn layer_norm(x: &Array2<f64>, scale: &Array1<f64>, offset: &Array1<f64>) -> (Array2<f64>, LnCache) {
    let d = x.ncols();
    let mut xhat = Array2::zeros(x.raw_dim());
    let mut inv_std = Vec::with_capacity(x.nrows());
    for (i, row) in x.rows().into_iter().enumerate() {
        let mean = row.sum() / d as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
        let istd = 1.0 / (var + LN_EPS).sqrt();
        inv_std.push(istd);
        for (j, &v) in row.iter().enumerate() {
            xhat[[i, j]] = (v - mean) * istd;
        }
    }
    let mut y = xhat.clone();
    for mut row in y.rows_mut() {
        row *= scale;
        row += offset;
    }
    (y, LnCache { xhat, inv_std })
}

fn encode_layer(
    x: &Array2<f64>,
    valid: &[bool],
    layer: &super::AttentionLayer,
    config: &ModelConfig,
    rng: Option<&mut ChaCha8Rng>,
) -> LayerCache {
    let rows = x.nrows();
    let d = config.embedding_dim;
    let heads = config.num_heads;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let mut q = x.dot(&layer.w_query);
    add_bias(&mut q, &layer.b_query);
    let mut k = x.dot(&layer.w_key);
    add_bias(&mut k, &layer.b_key);
    let mut v = x.dot(&layer.w_value);
    add_bias(&mut v, &layer.b_value);

    let mut attn = Vec::with_capacity(heads);
    let mut ctx = Array2::zeros((rows, d));
    for h in 0..heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let qh = q.slice(cols);
        let kh = k.slice(cols);
        let vh = v.slice(cols);
        let mut logits = qh.dot(&kh.t());
        logits *= scale;
        for j in 0..rows {
            if !valid[j] {
                logits.column_mut(j).fill(MASKED_LOGIT);
            }
        }
        // row-wise softmax with max shift
        for mut row in logits.rows_mut() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|l| (l - max).exp());
            let sum = row.sum();
            row.mapv_inplace(|e| e / sum);
        }
        let ctxh = logits.dot(&vh);
        ctx.slice_mut(cols).assign(&ctxh);
        attn.push(logits);
    }

    let mut attn_out = ctx.dot(&layer.w_output);
    add_bias(&mut attn_out, &layer.b_output);

    let mut rng = rng;
    let attn_drop = match rng.as_deref_mut() {
        Some(r) if config.dropout > 0.0 => {
            let mask = dropout_mask(rows, d, config.dropout, r);
            attn_out *= &mask;
            Some(mask)
        }
        _ => None,
    };

    let res1 = x + &attn_out;
    let (ln1_out, ln1) = layer_norm(&res1, &layer.ln1_scale, &layer.ln1_offset);

    let mut ff_pre = ln1_out.dot(&layer.w_ff1);
    add_bias(&mut ff_pre, &layer.b_ff1);
    let ff_act = ff_pre.mapv(|v| v.max(0.0));
    let mut ff_out = ff_act.dot(&layer.w_ff2);
    add_bias(&mut ff_out, &layer.b_ff2);

    let ff_drop = match rng.as_deref_mut() {
        Some(r) if config.dropout > 0.0 => {
            let mask = dropout_mask(rows, d, config.dropout, r);
            ff_out *= &mask;
            Some(mask)
        }
        _ => None,
    };

    let res2 = &ln1_out + &ff_out;
    let (out, ln2) = layer_norm(&res2, &layer.ln2_scale, &layer.ln2_offset);

    LayerCache {
        input: x.clone(),
        q,
        k,
        v,
        attn,
        ctx,
        attn_drop,
        ln1,
        ln1_out,
        ff_pre,
        ff_act,
        ff_drop,
        ln2,
        output: out,
    }
}

fn encode_cached(
    x: &Array2<f64>,
    valid: &[bool],
    params: &ModelParameters,
    config: &ModelConfig,
    mut rng: Option<&mut ChaCha8Rng>,
) -> (Array2<f64>, Vec<LayerCache>) {
    let mut caches = Vec::with_capacity(params.layers.len());
    let mut current = x.clone();
    for layer in &params.layers {
        let cache = encode_layer(&current, valid, layer, config, rng.as_deref_mut());
        current = cache.output.clone();
        caches.push(cache);
    }
    // padded rows are zeroed in the final output
    for (i, &ok) in valid.iter().enumerate() {
        if !ok {
            current.row_mut(i).fill(0.0);
        }
    }
    (current, caches)
}

/// Bidirectional multi-head self-attention over all rows, the mean
/// token included. `valid[i] == false` masks row i out of attention and
/// zeroes it in the output.
pub fn encode(
    x: &Array2<f64>,
    valid: &[bool],
    params: &ModelParameters,
    config: &ModelConfig,
) -> Array2<f64> {
    encode_cached(x, valid, params, config, None).0
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

fn highway_cached(
    encoded: &Array2<f64>,
    item_rows: &Array2<f64>,
    params: &ModelParameters,
) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    let rows = encoded.nrows();
    let d = encoded.ncols();
    let mut cat = Array2::zeros((rows, 2 * d));
    cat.slice_mut(s![.., ..d]).assign(item_rows);
    cat.slice_mut(s![.., d..]).assign(encoded);
    let gate = cat.dot(&params.gate_weight.t()).mapv(sigmoid);
    let o = &gate * item_rows + &(1.0 - &gate) * encoded;
    (o, gate, cat)
}

/// Gated combination o_i = g .* v_i + (1 - g) .* c_i with
/// g = sigmoid(W_g [v_i ; c_i]).
pub fn highway(
    encoded: &Array2<f64>,
    item_rows: &Array2<f64>,
    params: &ModelParameters,
) -> Array2<f64> {
    highway_cached(encoded, item_rows, params).0
}

fn select_cached(
    o: &Array2<f64>,
    params: &ModelParameters,
    config: &ModelConfig,
) -> Result<(IntentSet, Vec<f64>, Option<SparseDistribution>)> {
    let rows = o.nrows();
    let z: Vec<f64> = o.dot(&params.intent_weight).to_vec();
    let (gamma, selected, dist) = match config.intent_mode {
        IntentMode::Entmax => {
            let dist = entmax(&z, config.alpha)?;
            (dist.probabilities.clone(), dist.support.clone(), Some(dist))
        }
        IntentMode::Mean => {
            let mut gamma = vec![0.0; rows];
            gamma[rows - 1] = 1.0;
            (gamma, vec![rows - 1], None)
        }
        IntentMode::LastK(k) => {
            let items = rows - 1;
            let take = k.min(items);
            let mut gamma = vec![0.0; rows];
            let selected: Vec<usize> = (items - take..items).collect();
            for &i in &selected {
                gamma[i] = 1.0 / take as f64;
            }
            (gamma, selected, None)
        }
    };
    let weighted = selected
        .iter()
        .map(|&i| o.row(i).mapv(|v| v * gamma[i]))
        .collect();
    Ok((
        IntentSet {
            gamma,
            selected,
            weighted,
        },
        z,
        dist,
    ))
}

/// Score every row representation with the intent vector, pick the survivors
/// (alpha-entmax by default), and weight them by their selection mass.
pub fn select_intents(
    o: &Array2<f64>,
    params: &ModelParameters,
    config: &ModelConfig,
) -> Result<IntentSet> {
    select_cached(o, params, config).map(|(set, _, _)| set)
}

fn normalized_rows(table: &Array2<f64>) -> (Array2<f64>, Vec<f64>) {
    let mut norms = Vec::with_capacity(table.nrows());
    let mut out = table.clone();
    for mut row in out.rows_mut() {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        norms.push(norm);
        let denom = norm + COSINE_EPS;
        row.mapv_inplace(|v| v / denom);
    }
    (out, norms)
}

fn decode_cached(
    intents: &IntentSet,
    params: &ModelParameters,
) -> Result<(Vec<Vec<f64>>, Vec<Array1<f64>>, Vec<f64>, Array2<f64>, Vec<f64>)> {
    if intents.k() == 0 {
        return Err(Error::Model("no selected intents to decode".into()));
    }
    let (vn, v_norms) = normalized_rows(&params.item_table);
    let mut hn = Vec::with_capacity(intents.k());
    let mut h_norms = Vec::with_capacity(intents.k());
    let mut per_intent = Vec::with_capacity(intents.k());
    for h in &intents.weighted {
        let norm = h.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::Model("zero-norm intent representation".into()));
        }
        let hni = h.mapv(|v| v / (norm + COSINE_EPS));
        per_intent.push(vn.dot(&hni).to_vec());
        hn.push(hni);
        h_norms.push(norm);
    }
    Ok((per_intent, hn, h_norms, vn, v_norms))
}

/// Cosine similarity of each selected representation against every
/// item embedding row.
pub fn decode(intents: &IntentSet, params: &ModelParameters) -> Result<Vec<Vec<f64>>> {
    decode_cached(intents, params).map(|(scores, ..)| scores)
}

fn aggregate_cached(distributions: &[Vec<f64>], beta: f64) -> Result<(Vec<f64>, Vec<usize>)> {
    let k = distributions.len();
    if k == 0 {
        return Err(Error::Model("cannot aggregate zero distributions".into()));
    }
    let n = distributions[0].len();
    let mut scores = vec![0.0; n];
    let mut argmax = vec![0; n];
    for i in 0..n {
        let mut max = f64::NEG_INFINITY;
        let mut max_j = 0;
        let mut sum = 0.0;
        for (j, dist) in distributions.iter().enumerate() {
            let v = dist[i];
            sum += v;
            if v > max {
                max = v;
                max_j = j;
            }
        }
        scores[i] = beta * max + (1.0 - beta) * sum / k as f64;
        argmax[i] = max_j;
    }
    Ok((scores, argmax))
}

/// Elementwise beta * max + (1 - beta) * mean over the k score vectors.
pub fn aggregate(distributions: &[Vec<f64>], beta: f64) -> Result<Vec<f64>> {
    aggregate_cached(distributions, beta).map(|(scores, _)| scores)
}

/// Temperature-scaled cross-entropy over the full catalog, computed
/// with the log-sum-exp shift. `target` is a 1-based item index.
pub fn loss(scores: &[f64], target: u32, tau: f64) -> f64 {
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse: f64 = scores
        .iter()
        .map(|&v| ((v - max) / tau).exp())
        .sum::<f64>()
        .ln()
        + max / tau;
    lse - scores[target as usize - 1] / tau
}

pub(crate) fn forward_cached(
    example: &PrefixExample,
    params: &ModelParameters,
    config: &ModelConfig,
    mode: Mode,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<ForwardCache> {
    let training = mode == Mode::Train;
    let len = example.prefix.len();
    let rows = len + 1;
    let d = config.embedding_dim;

    let input_drop = match (training, rng.as_deref_mut()) {
        (true, Some(r)) if config.dropout > 0.0 => {
            Some(dropout_mask(rows, d, config.dropout, r))
        }
        _ => None,
    };
    let (x, item_rows) = embed_cached(example, params, config, input_drop.as_ref())?;

    let valid = vec![true; rows];
    let layer_rng = if training { rng } else { None };
    let (encoded, layers) = encode_cached(&x, &valid, params, config, layer_rng);

    let (o, gate, cat) = highway_cached(&encoded, &item_rows, params);
    let (intents, _z, dist) = select_cached(&o, params, config)?;
    let (per_intent, hn, h_norms, vn, v_norms) = decode_cached(&intents, params)?;
    let (scores, argmax) = aggregate_cached(&per_intent, config.beta)?;

    Ok(ForwardCache {
        example: example.clone(),
        input_drop,
        layers,
        encoded,
        item_rows,
        cat,
        gate,
        o,
        dist,
        intents,
        h_norms,
        hn,
        v_norms,
        vn,
        argmax,
        scores,
    })
}

/// Full pipeline: embed -> encode -> highway -> select -> decode -> aggregate.
/// Dropout is active only in train mode (and needs an rng).
pub fn forward(
    example: &PrefixExample,
    params: &ModelParameters,
    config: &ModelConfig,
    mode: Mode,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<(Vec<f64>, IntentSet)> {
    let cache = forward_cached(example, params, config, mode, rng)?;
    Ok((cache.scores, cache.intents))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelParameters;
    use rand::SeedableRng as _;

    fn small_config() -> ModelConfig {
        ModelConfig {
            embedding_dim: 8,
            max_len: 6,
            num_layers: 1,
            num_heads: 2,
            dropout: 0.0,
            ..ModelConfig::default()
        }
    }

    fn small_params(cfg: &ModelConfig, items: usize, seed: u64) -> ModelParameters {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ModelParameters::init(cfg, items, &mut rng)
    }

    fn example(prefix: &[u32], target: u32, max_len: usize) -> PrefixExample {
        PrefixExample::from_prefix(prefix, target, max_len)
    }

    #[test]
    fn embed_is_item_plus_position_plus_frequency() {
        let cfg = small_config();
        let params = small_params(&cfg, 10, 1);
        let ex = example(&[1, 3, 2, 3], 4, cfg.max_len);
        assert_eq!(ex.positions, vec![4, 3, 2, 1]);
        assert_eq!(ex.frequencies, vec![1, 2, 1, 2]);

        let x = embed_inputs(&ex, &params, &cfg).unwrap();
        assert_eq!(x.shape(), &[5, 8]);
        for (i, &it) in ex.prefix.iter().enumerate() {
            let expect = &params.item_table.row(it as usize - 1)
                + &params.position_table.row(ex.positions[i] as usize)
                + &params.frequency_table.row(ex.frequencies[i] as usize);
            for j in 0..8 {
                assert!((x[[i, j]] - expect[j]).abs() < 1e-12);
            }
        }
        // the extra row is the mean of the item embeddings plus the reserved
        // row 0 of both auxiliary tables
        let mut mean = Array1::<f64>::zeros(8);
        for &it in &ex.prefix {
            mean += &params.item_table.row(it as usize - 1);
        }
        mean /= ex.prefix.len() as f64;
        let expect = mean + &params.position_table.row(0) + &params.frequency_table.row(0);
        for j in 0..8 {
            assert!((x[[4, j]] - expect[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn embed_ablations_drop_their_terms() {
        let mut cfg = small_config();
        cfg.use_position_embedding = false;
        cfg.use_frequency_embedding = false;
        let params = small_params(&cfg, 10, 2);
        let ex = example(&[5, 2], 3, cfg.max_len);
        let x = embed_inputs(&ex, &params, &cfg).unwrap();
        for (i, &it) in ex.prefix.iter().enumerate() {
            let expect = params.item_table.row(it as usize - 1);
            for j in 0..8 {
                assert!((x[[i, j]] - expect[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn embed_rejects_bad_prefixes() {
        let cfg = small_config();
        let params = small_params(&cfg, 10, 3);
        let empty = PrefixExample {
            prefix: vec![],
            target: 1,
            positions: vec![],
            frequencies: vec![],
        };
        assert!(embed_inputs(&empty, &params, &cfg).is_err());
        let bad_item = example(&[11], 1, cfg.max_len);
        assert!(embed_inputs(&bad_item, &params, &cfg).is_err());
    }

    #[test]
    fn encode_keeps_shape_and_zeroes_invalid_rows() {
        let cfg = small_config();
        let params = small_params(&cfg, 10, 4);
        let ex = example(&[1, 2, 3], 4, cfg.max_len);
        let x = embed_inputs(&ex, &params, &cfg).unwrap();
        let valid = vec![true, true, false, true];
        let out = encode(&x, &valid, &params, &cfg);
        assert_eq!(out.shape(), x.shape());
        for j in 0..8 {
            assert_eq!(out[[2, j]], 0.0);
        }
    }

    #[test]
    fn invalid_rows_do_not_influence_valid_ones() {
        let cfg = small_config();
        let params = small_params(&cfg, 10, 5);
        let ex = example(&[1, 2, 3], 4, cfg.max_len);
        let mut x = embed_inputs(&ex, &params, &cfg).unwrap();
        let valid = vec![true, true, false, true];
        let a = encode(&x, &valid, &params, &cfg);
        // scribble on the masked row: valid outputs must not move
        for j in 0..8 {
            x[[2, j]] = 1e3 * (j as f64 + 1.0);
        }
        let b = encode(&x, &valid, &params, &cfg);
        for i in [0usize, 1, 3] {
            for j in 0..8 {
                assert!((a[[i, j]] - b[[i, j]]).abs() < 1e-9, "row {i} moved");
            }
        }
    }

    #[test]
    fn highway_midpoint_when_gate_weight_is_zero() {
        let cfg = small_config();
        let mut params = small_params(&cfg, 10, 6);
        params.gate_weight.fill(0.0);
        let v = Array2::from_shape_fn((3, 8), |(i, j)| (i * 8 + j) as f64 * 0.1);
        let c = Array2::from_shape_fn((3, 8), |(i, j)| 1.0 - (i + j) as f64 * 0.05);
        let o = highway(&c, &v, &params);
        for i in 0..3 {
            for j in 0..8 {
                assert!((o[[i, j]] - 0.5 * (v[[i, j]] + c[[i, j]])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn highway_is_identity_when_inputs_agree() {
        let cfg = small_config();
        let params = small_params(&cfg, 10, 7);
        let v = Array2::from_shape_fn((2, 8), |(i, j)| (i as f64) - 0.3 * j as f64);
        let o = highway(&v, &v, &params);
        for i in 0..2 {
            for j in 0..8 {
                assert!((o[[i, j]] - v[[i, j]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn highway_output_is_between_inputs() {
        let cfg = small_config();
        let params = small_params(&cfg, 10, 8);
        let v = Array2::from_shape_fn((4, 8), |(i, j)| ((i * j) as f64).sin());
        let c = Array2::from_shape_fn((4, 8), |(i, j)| ((i + j) as f64).cos());
        let o = highway(&c, &v, &params);
        for i in 0..4 {
            for j in 0..8 {
                let lo = v[[i, j]].min(c[[i, j]]);
                let hi = v[[i, j]].max(c[[i, j]]);
                assert!(o[[i, j]] >= lo - 1e-12 && o[[i, j]] <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn mean_mode_selects_only_the_mean_row() {
        let mut cfg = small_config();
        cfg.intent_mode = IntentMode::Mean;
        let params = small_params(&cfg, 10, 9);
        let o = Array2::from_shape_fn((4, 8), |(i, j)| (i as f64) * 0.2 + j as f64 * 0.01);
        let set = select_intents(&o, &params, &cfg).unwrap();
        assert_eq!(set.selected, vec![3]);
        assert_eq!(set.gamma[3], 1.0);
        for j in 0..8 {
            assert!((set.weighted[0][j] - o[[3, j]]).abs() < 1e-12);
        }
    }

    #[test]
    fn last_k_mode_is_uniform_over_recent_items() {
        let mut cfg = small_config();
        cfg.intent_mode = IntentMode::LastK(2);
        let params = small_params(&cfg, 10, 10);
        let o = Array2::from_shape_fn((5, 8), |(i, j)| (i + j) as f64 * 0.1);
        // rows 0..3 are items, row 4 is the mean row; last 2 items are rows 2, 3
        let set = select_intents(&o, &params, &cfg).unwrap();
        assert_eq!(set.selected, vec![2, 3]);
        assert!((set.gamma[2] - 0.5).abs() < 1e-12);
        assert!((set.gamma[3] - 0.5).abs() < 1e-12);
        // k larger than the number of items clamps
        cfg.intent_mode = IntentMode::LastK(9);
        let set = select_intents(&o, &params, &cfg).unwrap();
        assert_eq!(set.selected, vec![0, 1, 2, 3]);
        assert!((set.gamma[0] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn entmax_mode_collapses_to_one_intent_on_a_large_gap() {
        let cfg = small_config();
        let mut params = small_params(&cfg, 10, 11);
        // craft o rows so the intent scores are (10, 0, 0)
        params.intent_weight = Array1::from_vec(vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let mut o = Array2::zeros((3, 8));
        o[[0, 0]] = 10.0;
        o[[1, 1]] = 1.0;
        o[[2, 2]] = 1.0;
        let set = select_intents(&o, &params, &cfg).unwrap();
        assert_eq!(set.selected, vec![0]);
        assert!((set.gamma[0] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn decode_scores_are_cosines() {
        let cfg = small_config();
        let params = small_params(&cfg, 6, 12);
        // intent equal to a scaled copy of item 3's embedding: cosine with
        // that item is ~1 regardless of the scale
        let row = params.item_table.row(2).to_owned();
        let set = IntentSet {
            gamma: vec![1.0],
            selected: vec![0],
            weighted: vec![row.mapv(|v| v * 7.5)],
        };
        let scores = decode(&set, &params).unwrap();
        assert_eq!(scores.len(), 1);
        assert_eq!(scores[0].len(), 6);
        assert!((scores[0][2] - 1.0).abs() < 1e-9);
        for s in &scores[0] {
            assert!(*s >= -1.0 - 1e-9 && *s <= 1.0 + 1e-9);
        }
        // brute-force cosine oracle for every item
        let h = &set.weighted[0];
        let hn = h.iter().map(|v| v * v).sum::<f64>().sqrt();
        for i in 0..6 {
            let v = params.item_table.row(i);
            let dot: f64 = v.iter().zip(h.iter()).map(|(a, b)| a * b).sum();
            let vn = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            let expect = dot / ((vn + COSINE_EPS) * (hn + COSINE_EPS));
            assert!((scores[0][i] - expect).abs() < 1e-9);
        }
    }

    #[test]
    fn aggregate_matches_elementwise_oracle() {
        let a = vec![0.1, 0.9, -0.5];
        let b = vec![0.4, 0.2, -0.1];
        let beta = 0.3;
        let got = aggregate(&[a.clone(), b.clone()], beta).unwrap();
        for i in 0..3 {
            let mx = a[i].max(b[i]);
            let mean = (a[i] + b[i]) / 2.0;
            assert!((got[i] - (beta * mx + (1.0 - beta) * mean)).abs() < 1e-12);
        }
        // single distribution: aggregation is the identity for any beta
        let one = aggregate(&[a.clone()], 0.7).unwrap();
        for i in 0..3 {
            assert!((one[i] - a[i]).abs() < 1e-12);
        }
        // beta = 1 is a pure elementwise max
        let mx = aggregate(&[a.clone(), b.clone()], 1.0).unwrap();
        for i in 0..3 {
            assert!((mx[i] - a[i].max(b[i])).abs() < 1e-12);
        }
        assert!(aggregate(&[], 0.5).is_err());
    }

    #[test]
    fn loss_closed_forms() {
        // uniform scores: cross-entropy is ln(n) at any temperature
        let n = 7;
        let scores = vec![0.25; n];
        assert!((loss(&scores, 3, 0.07) - (n as f64).ln()).abs() < 1e-12);
        // two items with a gap of 2: loss = ln(1 + exp(-2 / tau))
        let tau = 0.5;
        let l = loss(&[1.0, -1.0], 1, tau);
        assert!((l - (1.0 + (-2.0 / tau).exp()).ln()).abs() < 1e-12);
        // smaller temperature sharpens: loss on the correct item shrinks
        assert!(loss(&[1.0, -1.0], 1, 0.1) < loss(&[1.0, -1.0], 1, 1.0));
        // and grows on the wrong item
        assert!(loss(&[1.0, -1.0], 2, 0.1) > loss(&[1.0, -1.0], 2, 1.0));
    }

    #[test]
    fn forward_is_deterministic_in_eval_mode() {
        let cfg = small_config();
        let params = small_params(&cfg, 10, 13);
        let ex = example(&[2, 5, 2, 7], 3, cfg.max_len);
        let (a, _) = forward(&ex, &params, &cfg, Mode::Eval, None).unwrap();
        let (b, _) = forward(&ex, &params, &cfg, Mode::Eval, None).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 10);
        for v in &a {
            assert!(v.is_finite() && *v >= -1.0 - 1e-9 && *v <= 1.0 + 1e-9);
        }
    }

    #[test]
    fn forward_handles_length_one_prefix() {
        let cfg = small_config();
        let params = small_params(&cfg, 10, 14);
        let ex = example(&[4], 6, cfg.max_len);
        let (scores, set) = forward(&ex, &params, &cfg, Mode::Eval, None).unwrap();
        assert_eq!(scores.len(), 10);
        assert!(set.k() >= 1);
    }
}
