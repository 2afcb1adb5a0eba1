//! Forward pass of the network on a [`Tape`].

use crate::error::{Error, Result};
use crate::model::config::NetConfig;
use crate::model::params::{BlockParams, DcsfnParams, LayerParams};
use crate::nn::GruParams;
use crate::tape::{Tape, Var};
use crate::tensor::{Element, Tensor};

/// Intermediate values of one inner-scale block. Index `i` of every vector
/// is the resolution `1 / 2^i`.
#[derive(Clone, Debug)]
pub struct InnerBlockActivations {
    pub input: Var,
    /// Max-pooled input.
    pub pooled: Vec<Var>,
    /// Pooled input after fusion with the next-coarser branch.
    pub connected: Vec<Var>,
    /// Branch outputs after the grouped conv and activation.
    pub features: Vec<Var>,
    pub output: Var,
}

pub fn inner_scale_block_trace<T: Element>(
    tape: &mut Tape<T>,
    x: Var,
    p: &BlockParams<Var>,
    cfg: &NetConfig,
) -> Result<InnerBlockActivations> {
    let xs = tape.shape(x)?;
    let k = cfg.block_scales;
    if xs.c != cfg.channels {
        return Err(Error::invalid(
            "inner_scale_block",
            format!("input has {} channels, expected {}", xs.c, cfg.channels),
        ));
    }
    let m = 1 << (k - 1);
    if xs.h % m != 0 || xs.w % m != 0 {
        return Err(Error::invalid(
            "inner_scale_block",
            format!("spatial size {}x{} not divisible by {m}", xs.h, xs.w),
        ));
    }
    let alpha = T::of(cfg.alpha);

    let mut pooled = Vec::with_capacity(k);
    for i in 0..k {
        pooled.push(tape.strided_max_pool(x, 1 << i)?);
    }

    // coarse to fine; the coarsest branch has nothing to connect to
    let mut connected = vec![pooled[k - 1]; k];
    let mut features = vec![pooled[k - 1]; k];
    for i in (0..k).rev() {
        if i + 1 < k && cfg.inner_connection {
            let up = tape.upsample_nearest(features[i + 1], 2)?;
            let cat = tape.concat_channels(&[pooled[i], up])?;
            connected[i] = tape.conv(cat, &p.links[i])?;
        } else {
            connected[i] = pooled[i];
        }
        let y = tape.conv(connected[i], &p.branches[i])?;
        features[i] = tape.leaky_relu(y, alpha)?;
    }

    let mut parts = Vec::with_capacity(k);
    parts.push(features[0]);
    for (i, &f) in features.iter().enumerate().skip(1) {
        parts.push(tape.upsample_nearest(f, 1 << i)?);
    }
    let cat = if parts.len() == 1 {
        parts[0]
    } else {
        tape.concat_channels(&parts)?
    };
    let fused = tape.conv(cat, &p.fuse)?;
    let output = tape.add(fused, x)?;
    Ok(InnerBlockActivations {
        input: x,
        pooled,
        connected,
        features,
        output,
    })
}

pub fn inner_scale_block<T: Element>(
    tape: &mut Tape<T>,
    x: Var,
    p: &BlockParams<Var>,
    cfg: &NetConfig,
) -> Result<Var> {
    Ok(inner_scale_block_trace(tape, x, p, cfg)?.output)
}

/// One dense layer: fuse the given history with a 1×1 conv, then run a block.
fn dense_layer<T: Element>(
    tape: &mut Tape<T>,
    history: &[Var],
    layer: &LayerParams<Var>,
    cfg: &NetConfig,
) -> Result<Var> {
    let input = if cfg.dense {
        if history.len() == 1 {
            history[0]
        } else {
            tape.concat_channels(history)?
        }
    } else {
        *history.last().expect("history starts with the layer input")
    };
    let fused = tape.conv(input, &layer.fuse)?;
    inner_scale_block(tape, fused, &layer.block, cfg)
}

/// Densely connected encoder. Returns `F_L` and every `F_1 … F_L`.
pub fn encoder_forward<T: Element>(
    tape: &mut Tape<T>,
    f0: Var,
    layers: &[LayerParams<Var>],
    cfg: &NetConfig,
) -> Result<(Var, Vec<Var>)> {
    let c = tape.shape(f0)?.c;
    if c != cfg.channels {
        return Err(Error::invalid(
            "encoder_forward",
            format!("input has {c} channels, expected {}", cfg.channels),
        ));
    }
    let mut history = vec![f0];
    for layer in layers {
        let f = dense_layer(tape, &history, layer, cfg)?;
        history.push(f);
    }
    let feats = history.split_off(1);
    let last = *feats.last().unwrap_or(&f0);
    Ok((last, feats))
}

/// Densely connected decoder seeded with `f0`, adding encoder layer `l` to
/// decoder layer `l` when skips are enabled. Returns `F_L^D`.
pub fn decoder_forward<T: Element>(
    tape: &mut Tape<T>,
    f0: Var,
    encoder_feats: &[Var],
    layers: &[LayerParams<Var>],
    cfg: &NetConfig,
) -> Result<Var> {
    if encoder_feats.len() != layers.len() {
        return Err(Error::invalid(
            "decoder_forward",
            format!(
                "{} encoder features for {} decoder layers",
                encoder_feats.len(),
                layers.len()
            ),
        ));
    }
    let seed_shape = tape.shape(f0)?;
    let mut history = vec![f0];
    for (layer, &skip) in layers.iter().zip(encoder_feats) {
        let skip_shape = tape.shape(skip)?;
        if skip_shape != seed_shape {
            return Err(Error::ShapeMismatch {
                op: "decoder_forward",
                lhs: seed_shape,
                rhs: skip_shape,
            });
        }
        let mut f = dense_layer(tape, &history, layer, cfg)?;
        if cfg.skip {
            f = tape.add(f, skip)?;
        }
        history.push(f);
    }
    Ok(*history.last().expect("non-empty"))
}

/// Fuses the encoder outputs of all scales with a shared GRU, walking from
/// the coarsest scale to the finest. `encoder_outputs[s]` lives at `1 / 2^s`;
/// the result uses the same indexing.
pub fn cross_scale_fuse<T: Element>(
    tape: &mut Tape<T>,
    encoder_outputs: &[Var],
    gru: &GruParams<Var>,
) -> Result<Vec<Var>> {
    let coarsest = *encoder_outputs
        .last()
        .ok_or_else(|| Error::invalid("cross_scale_fuse", "no scales"))?;
    let shapes = encoder_outputs
        .iter()
        .map(|&v| tape.shape(v))
        .collect::<Result<Vec<_>>>()?;
    for pair in shapes.windows(2) {
        let (fine, coarse) = (pair[0], pair[1]);
        if fine.h != 2 * coarse.h || fine.w != 2 * coarse.w || fine.n != coarse.n {
            return Err(Error::invalid(
                "cross_scale_fuse",
                format!("scales {fine} and {coarse} are not related by a factor of 2"),
            ));
        }
    }
    let cs = tape.shape(coarsest)?;
    let mut hidden = tape.constant(Tensor::zeros(cs.with_channels(gru.hidden_channels())));
    let mut fused = vec![hidden; encoder_outputs.len()];
    for s in (0..encoder_outputs.len()).rev() {
        if s + 1 < encoder_outputs.len() {
            hidden = tape.upsample_nearest(hidden, 2)?;
        }
        hidden = tape.conv_gru_step(encoder_outputs[s], hidden, gru)?;
        fused[s] = hidden;
    }
    Ok(fused)
}

/// Rain layer estimate and derained image, `background = input − rain`.
#[derive(Clone, Copy, Debug)]
pub struct DerainOutput {
    pub rain: Var,
    pub background: Var,
}

pub fn dcsfn_forward<T: Element>(
    tape: &mut Tape<T>,
    input: Var,
    p: &DcsfnParams<Var>,
) -> Result<DerainOutput> {
    let cfg = &p.config;
    let xs = tape.shape(input)?;
    if xs.c != cfg.image_channels {
        return Err(Error::InvalidConfig(format!(
            "input has {} channels, network expects {}",
            xs.c, cfg.image_channels
        )));
    }
    cfg.check_input_size(xs.h, xs.w)?;

    let mut encoded = Vec::with_capacity(cfg.scales);
    let mut skips = Vec::with_capacity(cfg.scales);
    for (s, sub) in p.subnets.iter().enumerate() {
        let scaled = if s == 0 {
            input
        } else {
            tape.avg_pool(input, 1 << s)?
        };
        let f0 = tape.conv(scaled, &sub.entry)?;
        let (last, feats) = encoder_forward(tape, f0, &sub.encoder, cfg)?;
        encoded.push(last);
        skips.push(feats);
    }
    let seeds = cross_scale_fuse(tape, &encoded, &p.gru)?;

    let mut outputs = Vec::with_capacity(cfg.scales);
    for (s, sub) in p.subnets.iter().enumerate() {
        let d = decoder_forward(tape, seeds[s], &skips[s], &sub.decoder, cfg)?;
        outputs.push(if s == 0 {
            d
        } else {
            tape.upsample_nearest(d, 1 << s)?
        });
    }
    let cat = if outputs.len() == 1 {
        outputs[0]
    } else {
        tape.concat_channels(&outputs)?
    };
    let fused = tape.conv(cat, &p.head.fuse)?;
    let rain = tape.conv(fused, &p.head.out)?;
    let background = tape.sub(input, rain)?;
    Ok(DerainOutput { rain, background })
}

/// Runs the network without recording gradients. Returns `(rain, background)`.
pub fn derain<T: Element>(
    params: &DcsfnParams<Tensor<T>>,
    image: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let mut tape = Tape::new();
    let p = params.bind(&mut tape, false);
    let x = tape.constant(image.clone());
    let out = dcsfn_forward(&mut tape, x, &p)?;
    Ok((
        tape.value(out.rain)?.clone(),
        tape.value(out.background)?.clone(),
    ))
}
