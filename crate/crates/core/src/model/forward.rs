use std::rc::Rc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::masking::{extract_motion, masking_probabilities, motion_intensity, MaskPlan, Padding};
use crate::model::{ArchConfig, BlockParams, ModelParams, Projection, Stream, LN_EPS};
use crate::numerics::{DenseArray, Tape, Var};

/// Groups every `l` consecutive frames of a `T×V×C` sequence into one token:
/// `out[t, v, i·C + c] = s[t·l + i, v, c]`.
pub fn segment_reshape(s: &DenseArray, l: usize) -> Result<DenseArray> {
    let &[t, v, c] = s.shape() else {
        return Err(Error::Shape(format!("expected T×V×C, got {:?}", s.shape())));
    };
    if l == 0 || t % l != 0 {
        return Err(Error::Shape(format!("{t} frames not divisible into segments of {l}")));
    }
    let t_e = t / l;
    let mut out = vec![0.0; s.len()];
    for seg in 0..t_e {
        for joint in 0..v {
            let dst = (seg * v + joint) * l * c;
            for i in 0..l {
                let src = ((seg * l + i) * v + joint) * c;
                out[dst + i * c..dst + (i + 1) * c].copy_from_slice(&s.data()[src..src + c]);
            }
        }
    }
    DenseArray::new(vec![t_e, v, l * c], out)
}

/// Per-token standardization over the last axis:
/// `(x − mean) / (σ_population + 1e-6)`.
pub fn normalize_target(x: &DenseArray) -> DenseArray {
    let (rows, cols) = x.dims2();
    let mut out = vec![0.0; x.len()];
    for r in 0..rows {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / cols as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
        let denom = var.sqrt() + 1e-6;
        for (o, v) in out[r * cols..(r + 1) * cols].iter_mut().zip(row) {
            *o = (v - mean) / denom;
        }
    }
    DenseArray::new(x.shape().to_vec(), out).expect("same shape")
}

fn stream_values(view: &DenseArray, stream: Stream, arch: &ArchConfig) -> Result<DenseArray> {
    match stream {
        Stream::Joint => Ok(view.clone()),
        Stream::Motion => Ok(extract_motion(view, arch.target_stride, arch.target_padding)?.values),
    }
}

fn check_view(view: &DenseArray, arch: &ArchConfig) -> Result<()> {
    let expected = [arch.frames, arch.joints, arch.channels];
    if view.shape() != expected {
        return Err(Error::Shape(format!("view {:?}, network expects {expected:?}", view.shape())));
    }
    Ok(())
}

/// Encoder input tokens (`T_e × V × l·C_s`) for a raw view.
pub fn input_tokens(view: &DenseArray, arch: &ArchConfig) -> Result<DenseArray> {
    check_view(view, arch)?;
    segment_reshape(&stream_values(view, arch.input_stream, arch)?, arch.segment_len)
}

/// Motion-aware masking distribution over the `T_e × V` grid: softmax of
/// segment motion intensity, with motion taken at stride `l` and replicate
/// padding. Views too short for that stride get a uniform distribution.
pub fn masking_distribution(view: &DenseArray, arch: &ArchConfig, temperature: f64) -> Result<DenseArray> {
    check_view(view, arch)?;
    let l = arch.segment_len;
    if 2 * l > arch.frames {
        let n = arch.tokens();
        return DenseArray::new(vec![arch.segments(), arch.joints], vec![1.0 / n as f64; n]);
    }
    let motion = extract_motion(view, l, Padding::Replicate)?;
    masking_probabilities(&motion_intensity(&motion.values, l)?, temperature)
}

/// Everything one pre-training sample contributes to a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct PretrainSample {
    /// `T_e × V × l·C_s` encoder tokens.
    pub input: DenseArray,
    /// Normalized target tokens, same shape as `input`.
    pub target: DenseArray,
    pub plan: MaskPlan,
}

pub fn prepare_sample(view: &DenseArray, arch: &ArchConfig, plan: MaskPlan) -> Result<PretrainSample> {
    let input = input_tokens(view, arch)?;
    if plan.num_tokens() != arch.tokens() {
        return Err(Error::Shape(format!(
            "mask plan covers {} tokens, grid has {}",
            plan.num_tokens(),
            arch.tokens()
        )));
    }
    let target = segment_reshape(&stream_values(view, arch.target_stream, arch)?, arch.segment_len)?;
    Ok(PretrainSample {
        input,
        target: normalize_target(&target),
        plan,
    })
}

/// Places every array on `tape`; names accepted by `trainable` become
/// differentiable leaves, the rest constants.
pub fn bind_params<'t>(
    tape: &'t Tape,
    params: &ModelParams<DenseArray>,
    trainable: impl Fn(&str) -> bool,
) -> ModelParams<Var<'t>> {
    params.map(|name, a| {
        if trainable(name) {
            tape.param(a.clone())
        } else {
            tape.constant(a.clone())
        }
    })
}

/// Per-token affine embedding of a `rows × l·C_s` token matrix.
pub fn joint_embed<'t>(tokens: Var<'t>, weight: Var<'t>, bias: Var<'t>) -> Result<Var<'t>> {
    let rows = tokens.value().dims2();
    tokens.reshape(vec![rows.0, rows.1])?.linear(weight, bias)
}

/// `E[t,v] + P_s[v] + P_t[t]` for every stacked grid in `x`.
pub fn add_positional<'t>(x: Var<'t>, spatial: Var<'t>, temporal: Var<'t>) -> Result<Var<'t>> {
    x.add_positional(spatial, temporal)
}

/// Unmasked rows of each sample's grid, ascending flat index, samples
/// stacked in order.
pub fn select_unmasked<'t>(x: Var<'t>, plans: &[&MaskPlan]) -> Result<Var<'t>> {
    let rows: Vec<usize> = grid_rows(plans, |p| &p.unmasked)?;
    x.gather_rows(&rows)
}

fn grid_rows(plans: &[&MaskPlan], pick: impl Fn(&MaskPlan) -> &Vec<usize>) -> Result<Vec<usize>> {
    let mut rows = Vec::new();
    let mut offset = 0;
    for p in plans {
        rows.extend(pick(p).iter().map(|&i| offset + i));
        offset += p.num_tokens();
    }
    Ok(rows)
}

fn dropout<'t>(x: Var<'t>, rate: f64, rng: Option<&mut ChaCha8Rng>) -> Result<Var<'t>> {
    match rng {
        Some(rng) if rate > 0.0 => {
            let keep = 1.0 / (1.0 - rate);
            let mask = DenseArray::from_fn(x.shape(), |_| if rng.random::<f64>() < rate { 0.0 } else { keep });
            x.mul(x.tape().constant(mask))
        }
        _ => Ok(x),
    }
}

/// Pre-LN transformer blocks followed by a trailing layer norm. Rows are
/// split into consecutive `segments`, one per sample, and attention stays
/// within a segment. Returns the output and every attention map.
#[allow(clippy::too_many_arguments)]
pub fn transformer_stack<'t>(
    mut x: Var<'t>,
    blocks: &[BlockParams<Var<'t>>],
    norm_scale: Var<'t>,
    norm_shift: Var<'t>,
    heads: usize,
    segments: &[usize],
    dropout_rate: f64,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<(Var<'t>, Vec<Rc<DenseArray>>)> {
    let mut maps = Vec::new();
    for b in blocks {
        let h = x.layer_norm(b.norm1_scale, b.norm1_shift, LN_EPS)?;
        let qkv = h.linear(b.qkv_weight, b.qkv_bias)?;
        let (attn, probs) = qkv.attention(segments, heads)?;
        maps.extend(probs);
        let attn = dropout(attn.linear(b.proj_weight, b.proj_bias)?, dropout_rate, rng.as_deref_mut())?;
        x = x.add(attn)?;
        let h = x.layer_norm(b.norm2_scale, b.norm2_shift, LN_EPS)?;
        let mlp = h.linear(b.fc1_weight, b.fc1_bias)?.gelu().linear(b.fc2_weight, b.fc2_bias)?;
        x = x.add(dropout(mlp, dropout_rate, rng.as_deref_mut())?)?;
    }
    Ok((x.layer_norm(norm_scale, norm_shift, LN_EPS)?, maps))
}

/// Scatters (projected) encoder outputs back to their grid positions and
/// fills masked positions with the mask token.
pub fn insert_mask_tokens<'t>(
    encoded: Var<'t>,
    plans: &[&MaskPlan],
    mask_token: Var<'t>,
    projection: Option<&Projection<Var<'t>>>,
) -> Result<Var<'t>> {
    let visible: usize = plans.iter().map(|p| p.unmasked.len()).sum();
    let rows = encoded.value().dims2().0;
    if rows != visible {
        return Err(Error::Shape(format!("{rows} encoded rows for {visible} visible tokens")));
    }
    let projected = match projection {
        Some(p) => encoded.linear(p.weight, p.bias)?,
        None => encoded,
    };
    let mut sources = Vec::new();
    let mut offset = 0;
    for p in plans {
        sources.extend(p.visible_rows().into_iter().map(|r| r.map(|k| offset + k)));
        offset += p.unmasked.len();
    }
    projected.fill_rows(mask_token, &sources)
}

/// Decoder positional embeddings, decoder stack over full grids, and the
/// per-token linear head. Returns `(decoder output, predictions, maps)`.
pub fn decode_and_predict<'t>(
    grid: Var<'t>,
    params: &ModelParams<Var<'t>>,
    arch: &ArchConfig,
    batch: usize,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<(Var<'t>, Var<'t>, Vec<Rc<DenseArray>>)> {
    let z = grid.add_positional(params.dec_pos_spatial, params.dec_pos_temporal)?;
    let (out, maps) = transformer_stack(
        z,
        &params.decoder,
        params.dec_norm_scale,
        params.dec_norm_shift,
        arch.heads,
        &vec![arch.tokens(); batch],
        arch.dropout,
        rng,
    )?;
    let pred = out.linear(params.head_weight, params.head_bias)?;
    Ok((out, pred, maps))
}

/// Mean over all masked tokens of the batch of the squared L2 error between
/// prediction and target rows.
pub fn masked_mse_loss<'t>(pred: Var<'t>, target: &DenseArray, plans: &[&MaskPlan]) -> Result<Var<'t>> {
    let masked = grid_rows(plans, |p| &p.masked)?;
    pred.masked_mse(target, &masked)
}

/// Tape handles produced by one batched pre-training forward pass.
pub struct BatchOutput<'t> {
    pub embedded: Var<'t>,
    pub positioned: Var<'t>,
    pub visible: Var<'t>,
    pub encoded: Var<'t>,
    pub decoder_input: Var<'t>,
    pub decoder_output: Var<'t>,
    pub prediction: Var<'t>,
    pub target: DenseArray,
    pub loss: Var<'t>,
    pub encoder_attention: Vec<Rc<DenseArray>>,
    pub decoder_attention: Vec<Rc<DenseArray>>,
}

fn stack(arrays: impl IntoIterator<Item = DenseArray>, cols: usize) -> Result<DenseArray> {
    let data: Vec<f64> = arrays.into_iter().flat_map(DenseArray::into_data).collect();
    let rows = data.len() / cols;
    DenseArray::new(vec![rows, cols], data)
}

/// Full masked-prediction objective over a batch of prepared samples.
pub fn forward_batch<'t>(
    tape: &'t Tape,
    params: &ModelParams<Var<'t>>,
    arch: &ArchConfig,
    samples: &[PretrainSample],
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<BatchOutput<'t>> {
    if samples.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let d = arch.token_dim();
    let plans: Vec<&MaskPlan> = samples.iter().map(|s| &s.plan).collect();
    let input = tape.constant(stack(samples.iter().map(|s| s.input.clone()), d)?);
    let target = stack(samples.iter().map(|s| s.target.clone()), d)?;

    let embedded = joint_embed(input, params.embed_weight, params.embed_bias)?;
    let positioned = add_positional(embedded, params.enc_pos_spatial, params.enc_pos_temporal)?;
    let visible = select_unmasked(positioned, &plans)?;
    let segments: Vec<usize> = plans.iter().map(|p| p.unmasked.len()).collect();
    let (encoded, encoder_attention) = transformer_stack(
        visible,
        &params.encoder,
        params.enc_norm_scale,
        params.enc_norm_shift,
        arch.heads,
        &segments,
        arch.dropout,
        rng.as_deref_mut(),
    )?;
    let decoder_input = insert_mask_tokens(encoded, &plans, params.mask_token, params.projection.as_ref())?;
    let (decoder_output, prediction, decoder_attention) =
        decode_and_predict(decoder_input, params, arch, samples.len(), rng)?;
    let loss = masked_mse_loss(prediction, &target, &plans)?;
    Ok(BatchOutput {
        embedded,
        positioned,
        visible,
        encoded,
        decoder_input,
        decoder_output,
        prediction,
        target,
        loss,
        encoder_attention,
        decoder_attention,
    })
}

/// Intermediate values of a single-view forward pass.
#[derive(Debug, Clone)]
pub struct ForwardArtifacts {
    /// `E`, `T_e·V × C_e`
    pub embedded: DenseArray,
    /// `E_p`
    pub positioned: DenseArray,
    /// `E_p^u`, `N_u × C_e`
    pub visible: DenseArray,
    /// `H_e^u`
    pub encoded: DenseArray,
    /// `H_e`, `T_e·V × C_d`
    pub decoder_input: DenseArray,
    pub decoder_output: DenseArray,
    /// `T_e × V × l·C_s`
    pub prediction: DenseArray,
    /// Normalized target, same shape as `prediction`.
    pub target: DenseArray,
    pub loss: f64,
    pub plan: MaskPlan,
    /// Encoder attention maps, block-major then head.
    pub encoder_attention: Vec<DenseArray>,
}

/// Runs the pre-training objective on one view with a given mask plan.
pub fn forward_pretrain(
    view: &DenseArray,
    plan: &MaskPlan,
    params: &ModelParams<DenseArray>,
    arch: &ArchConfig,
) -> Result<ForwardArtifacts> {
    arch.validate()?;
    let sample = prepare_sample(view, arch, plan.clone())?;
    let tape = Tape::new();
    let vars = bind_params(&tape, params, |_| false);
    let out = forward_batch(&tape, &vars, arch, std::slice::from_ref(&sample), None)?;
    let grid = vec![arch.segments(), arch.joints, arch.token_dim()];
    Ok(ForwardArtifacts {
        embedded: (*out.embedded.value()).clone(),
        positioned: (*out.positioned.value()).clone(),
        visible: (*out.visible.value()).clone(),
        encoded: (*out.encoded.value()).clone(),
        decoder_input: (*out.decoder_input.value()).clone(),
        decoder_output: (*out.decoder_output.value()).clone(),
        prediction: (*out.prediction.value()).clone().reshape(grid.clone())?,
        target: out.target.reshape(grid)?,
        loss: out.loss.value().item(),
        plan: sample.plan,
        encoder_attention: out.encoder_attention.iter().map(|m| (**m).clone()).collect(),
    })
}

/// Mean-pooled encoder features of unmasked views: every token passes
/// through the encoder and the outputs are averaged per sample. `inputs` are
/// `T_e × V × l·C_s` token arrays; the result is `batch × C_e`.
pub fn encode_pooled<'t>(
    tape: &'t Tape,
    params: &ModelParams<Var<'t>>,
    arch: &ArchConfig,
    inputs: &[DenseArray],
    rng: Option<&mut ChaCha8Rng>,
) -> Result<Var<'t>> {
    if inputs.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let input = tape.constant(stack(inputs.iter().cloned(), arch.token_dim())?);
    let embedded = joint_embed(input, params.embed_weight, params.embed_bias)?;
    let positioned = add_positional(embedded, params.enc_pos_spatial, params.enc_pos_temporal)?;
    let segments = vec![arch.tokens(); inputs.len()];
    let (encoded, _) = transformer_stack(
        positioned,
        &params.encoder,
        params.enc_norm_scale,
        params.enc_norm_shift,
        arch.heads,
        &segments,
        arch.dropout,
        rng,
    )?;
    encoded.mean_segments(&segments)
}
