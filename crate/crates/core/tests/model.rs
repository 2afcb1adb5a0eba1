mod common;

use common::reference as naive;
use common::{random_params, rng, uniform};
use dcsfn::model::{
    cross_scale_fuse, dcsfn_forward, decoder_forward, derain, encoder_forward, inner_scale_block,
    inner_scale_block_trace, DcsfnParams, NetConfig,
};
use dcsfn::nn::{ConvSpec, GruParams};
use dcsfn::{Shape, Tape, Tensor};

type P = DcsfnParams<Tensor<f64>>;

fn cfg(spec: &str) -> NetConfig {
    NetConfig::parse(spec).unwrap()
}

fn zero_conv(spec: &mut ConvSpec<Tensor<f64>>) {
    spec.weight = Tensor::zeros(spec.weight.shape());
    spec.bias = Tensor::zeros(spec.bias.shape());
}

fn close(a: &Tensor<f64>, b: &Tensor<f64>) {
    assert_eq!(a.shape(), b.shape());
    let d = a.max_abs_diff(b);
    assert!(d < 1e-10, "max abs diff {d}");
}

fn feature(c: &NetConfig, size: usize, seed: u64) -> Tensor<f64> {
    uniform(Shape::new(2, c.channels, size, size), -1.0, 1.0, &mut rng(seed))
}

#[test]
fn zero_block_is_identity() {
    for k in 1..=4 {
        let c = cfg(&format!("tiny,K={k}"));
        let mut p: P = random_params(&c, 1);
        let block = &mut p.subnets[0].encoder[0].block;
        block.branches.iter_mut().for_each(zero_conv);
        block.links.iter_mut().for_each(zero_conv);
        zero_conv(&mut block.fuse);
        let x = feature(&c, 16, 2);
        let mut tape = Tape::new();
        let b = p.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let z = inner_scale_block(&mut tape, xv, &b.subnets[0].encoder[0].block, &c).unwrap();
        assert!(tape.value(z).unwrap().bitwise_eq(&x), "K={k}");
    }
}

#[test]
fn single_scale_block() {
    let c = cfg("tiny,K=1");
    let p: P = random_params(&c, 3);
    let block = &p.subnets[0].encoder[0].block;
    assert_eq!(block.branches.len(), 1);
    assert!(block.links.is_empty());
    let x = feature(&c, 8, 4);
    let mut tape = Tape::new();
    let b = p.bind(&mut tape, false);
    let xv = tape.constant(x.clone());
    let trace = inner_scale_block_trace(&mut tape, xv, &b.subnets[0].encoder[0].block, &c).unwrap();
    assert_eq!(trace.pooled.len(), 1);
    let y = naive::lrelu(&naive::apply(&x, &block.branches[0]), c.alpha);
    let expected = naive::add(&naive::apply(&y, &block.fuse), &x);
    close(tape.value(trace.output).unwrap(), &expected);
}

#[test]
fn block_matches_unrolled_composition() {
    for spec in ["tiny,K=3", "tiny,K=2,n=2", "tiny,K=3,inner=off", "tiny,K=4"] {
        let c = cfg(spec);
        let p: P = random_params(&c, 5);
        let block = &p.subnets[1].decoder[1].block;
        let x = feature(&c, 8, 6);
        let mut tape = Tape::new();
        let b = p.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let z = inner_scale_block(&mut tape, xv, &b.subnets[1].decoder[1].block, &c).unwrap();
        close(tape.value(z).unwrap(), &naive::inner_block(&x, block, &c));
    }
}

#[test]
fn block_trace_shapes() {
    let c = cfg("tiny,K=3");
    let p: P = random_params(&c, 7);
    let x = feature(&c, 16, 8);
    let mut tape = Tape::new();
    let b = p.bind(&mut tape, false);
    let xv = tape.constant(x.clone());
    let t = inner_scale_block_trace(&mut tape, xv, &b.subnets[0].encoder[0].block, &c).unwrap();
    for i in 0..3 {
        let want = x.shape().with_spatial(16 >> i, 16 >> i);
        for v in [t.pooled[i], t.connected[i], t.features[i]] {
            assert_eq!(tape.shape(v).unwrap(), want);
        }
        close(tape.value(t.pooled[i]).unwrap(), &naive::max_pool(&x, 1 << i));
    }
    assert!(tape.value(t.connected[2]).unwrap().bitwise_eq(tape.value(t.pooled[2]).unwrap()));
    assert_eq!(tape.shape(t.output).unwrap(), x.shape());
}

#[test]
fn block_rejects_bad_input() {
    let c = cfg("tiny,K=3");
    let p: P = random_params(&c, 9);
    let mut tape = Tape::new();
    let b = p.bind(&mut tape, false);
    let odd = tape.constant(Tensor::zeros(Shape::new(1, 4, 6, 8)));
    assert!(inner_scale_block(&mut tape, odd, &b.subnets[0].encoder[0].block, &c).is_err());
    let narrow = tape.constant(Tensor::zeros(Shape::new(1, 3, 8, 8)));
    assert!(inner_scale_block(&mut tape, narrow, &b.subnets[0].encoder[0].block, &c).is_err());
}

#[test]
fn dense_fusion_widths() {
    let c = cfg("tiny,C=4,L=3");
    let layout = DcsfnParams::layout(&c).unwrap();
    for sub in &layout.subnets {
        let enc: Vec<_> = sub.encoder.iter().map(|l| l.fuse.geometry.in_channels).collect();
        let dec: Vec<_> = sub.decoder.iter().map(|l| l.fuse.geometry.in_channels).collect();
        assert_eq!(enc, [4, 8, 12]);
        assert_eq!(dec, [4, 8, 12]);
    }
    let flat = DcsfnParams::layout(&cfg("tiny,C=4,L=3,dense=off")).unwrap();
    assert!(flat.subnets[0].encoder.iter().all(|l| l.fuse.geometry.in_channels == 4));
}

#[test]
fn encoder_single_layer() {
    let c = cfg("tiny,L=1");
    let p: P = random_params(&c, 10);
    let f0 = feature(&c, 16, 11);
    let layer = &p.subnets[0].encoder[0];
    let expected = naive::inner_block(&naive::apply(&f0, &layer.fuse), &layer.block, &c);
    let mut tape = Tape::new();
    let b = p.bind(&mut tape, false);
    let x = tape.constant(f0);
    let (last, feats) = encoder_forward(&mut tape, x, &b.subnets[0].encoder, &c).unwrap();
    assert_eq!(feats.len(), 1);
    close(tape.value(last).unwrap(), &expected);
}

#[test]
fn encoder_matches_unrolled_composition() {
    for spec in ["tiny,L=2", "tiny,L=3,dense=off"] {
        let c = cfg(spec);
        let p: P = random_params(&c, 12);
        let f0 = feature(&c, 16, 13);
        let expected = naive::encoder(&f0, &p.subnets[0].encoder, &c);
        let mut tape = Tape::new();
        let b = p.bind(&mut tape, false);
        let x = tape.constant(f0);
        let (last, feats) = encoder_forward(&mut tape, x, &b.subnets[0].encoder, &c).unwrap();
        assert_eq!(feats.len(), c.depth);
        for (v, e) in feats.iter().zip(&expected) {
            close(tape.value(*v).unwrap(), e);
        }
        assert_eq!(last, *feats.last().unwrap());
    }
}

#[test]
fn decoder_with_zero_weights_passes_skips_through() {
    for depth in 1..=3 {
        let c = cfg(&format!("tiny,L={depth}"));
        let mut p: P = random_params(&c, 14);
        for spec in p.convs_mut() {
            zero_conv(spec);
        }
        let mut tape = Tape::new();
        let b = p.bind(&mut tape, false);
        let seed = tape.constant(feature(&c, 16, 15));
        let skips: Vec<Tensor<f64>> = (0..depth).map(|l| feature(&c, 16, 20 + l as u64)).collect();
        let skip_vars: Vec<_> = skips.iter().map(|s| tape.constant(s.clone())).collect();
        let out = decoder_forward(&mut tape, seed, &skip_vars, &b.subnets[0].decoder, &c).unwrap();
        assert!(tape.value(out).unwrap().bitwise_eq(&skips[depth - 1]), "L={depth}");
    }
}

#[test]
fn decoder_matches_unrolled_composition() {
    for spec in ["tiny,L=2", "tiny,L=2,skip=off", "tiny,L=2,dense=off"] {
        let c = cfg(spec);
        let p: P = random_params(&c, 16);
        let seed = feature(&c, 16, 17);
        let skips: Vec<Tensor<f64>> = (0..2).map(|l| feature(&c, 16, 30 + l)).collect();
        let expected = naive::decoder(&seed, &skips, &p.subnets[0].decoder, &c);
        let mut tape = Tape::new();
        let b = p.bind(&mut tape, false);
        let s = tape.constant(seed.clone());
        let vars: Vec<_> = skips.iter().map(|t| tape.constant(t.clone())).collect();
        let out = decoder_forward(&mut tape, s, &vars, &b.subnets[0].decoder, &c).unwrap();
        assert_eq!(tape.shape(out).unwrap(), seed.shape());
        close(tape.value(out).unwrap(), &expected);
    }
}

#[test]
fn decoder_rejects_mismatched_skips() {
    let c = cfg("tiny,L=2");
    let p: P = random_params(&c, 18);
    let mut tape = Tape::new();
    let b = p.bind(&mut tape, false);
    let s = tape.constant(feature(&c, 16, 1));
    let good = tape.constant(feature(&c, 16, 2));
    let small = tape.constant(feature(&c, 8, 3));
    assert!(decoder_forward(&mut tape, s, &[good], &b.subnets[0].decoder, &c).is_err());
    assert!(decoder_forward(&mut tape, s, &[good, small], &b.subnets[0].decoder, &c).is_err());
}

fn pyramid(c: &NetConfig, size: usize, seed: u64) -> Vec<Tensor<f64>> {
    (0..c.scales).map(|s| feature(c, size >> s, seed + s as u64)).collect()
}

#[test]
fn zero_gru_fuses_to_zeros() {
    let c = cfg("tiny");
    let gru = GruParams::<Tensor<f64>>::zeros(c.channels, c.channels).unwrap();
    let mut tape = Tape::new();
    let g = gru.map(&mut |t| tape.constant(t.clone()));
    let enc: Vec<_> = pyramid(&c, 16, 40).into_iter().map(|t| tape.constant(t)).collect();
    let fused = cross_scale_fuse(&mut tape, &enc, &g).unwrap();
    let sizes: Vec<_> = fused.iter().map(|v| tape.shape(*v).unwrap().h).collect();
    assert_eq!(sizes, [16, 8, 4]);
    for v in fused {
        assert!(tape.value(v).unwrap().data().iter().all(|&x| x == 0.0));
    }
}

#[test]
fn single_scale_fusion_is_one_gru_step() {
    let c = cfg("tiny,S=1");
    let p: P = random_params(&c, 41);
    let x = feature(&c, 8, 42);
    let mut tape = Tape::new();
    let b = p.bind(&mut tape, false);
    let xv = tape.constant(x.clone());
    let fused = cross_scale_fuse(&mut tape, &[xv], &b.gru).unwrap();
    let h0 = tape.constant(Tensor::zeros(x.shape()));
    let direct = tape.conv_gru_step(xv, h0, &b.gru).unwrap();
    assert_eq!(fused.len(), 1);
    assert!(tape.value(fused[0]).unwrap().bitwise_eq(tape.value(direct).unwrap()));
}

#[test]
fn fusion_matches_unrolled_recurrence() {
    let c = cfg("tiny");
    let p: P = random_params(&c, 43);
    let enc = pyramid(&c, 16, 44);
    let expected = naive::cross_scale(&enc, &p.gru);
    let mut tape = Tape::new();
    let b = p.bind(&mut tape, false);
    let vars: Vec<_> = enc.iter().map(|t| tape.constant(t.clone())).collect();
    let fused = cross_scale_fuse(&mut tape, &vars, &b.gru).unwrap();
    for (v, e) in fused.iter().zip(&expected) {
        close(tape.value(*v).unwrap(), e);
    }
}

#[test]
fn fusion_rejects_broken_pyramid() {
    let c = cfg("tiny");
    let p: P = random_params(&c, 45);
    let mut tape = Tape::new();
    let b = p.bind(&mut tape, false);
    let a = tape.constant(feature(&c, 16, 1));
    let bad = tape.constant(feature(&c, 4, 2));
    assert!(cross_scale_fuse(&mut tape, &[a, bad], &b.gru).is_err());
    assert!(cross_scale_fuse(&mut tape, &[], &b.gru).is_err());
}

#[test]
fn gru_output_lies_between_state_and_candidate() {
    let c = cfg("tiny");
    let p: P = random_params(&c, 46);
    let x = feature(&c, 8, 47);
    let h = feature(&c, 8, 48);
    let rh = {
        let xh = naive::concat(&[&x, &h]);
        let r = naive::sigmoid(&naive::apply(&xh, &p.gru.reset));
        naive::zip(&r, &h, |a, b| a * b)
    };
    let cand = naive::tanh(&naive::apply(&naive::concat(&[&x, &rh]), &p.gru.candidate));
    let mut tape = Tape::new();
    let g = p.gru.map(&mut |t| tape.constant(t.clone()));
    let (xv, hv) = (tape.constant(x), tape.constant(h.clone()));
    let out = tape.conv_gru_step(xv, hv, &g).unwrap();
    let out = tape.value(out).unwrap();
    for ((o, a), b) in out.data().iter().zip(h.data()).zip(cand.data()) {
        assert!(*o >= a.min(*b) - 1e-12 && *o <= a.max(*b) + 1e-12);
    }
}

#[test]
fn network_matches_unrolled_composition() {
    for spec in ["tiny", "tiny,K=2,S=2", "tiny,skip=off,dense=off,inner=off"] {
        let c = cfg(spec);
        let p: P = random_params(&c, 50);
        let image: Tensor<f64> = uniform(Shape::new(2, 3, 16, 16), 0.0, 1.0, &mut rng(51));
        let (rain, background) = naive::forward(&image, &p);
        let (r, b) = derain(&p, &image).unwrap();
        close(&r, &rain);
        close(&b, &background);
    }
}

#[test]
fn zero_head_gives_zero_rain() {
    let c = cfg("tiny");
    let mut p: P = random_params(&c, 52);
    zero_conv(&mut p.head.out);
    let image: Tensor<f64> = uniform(Shape::new(1, 3, 16, 16), 0.0, 1.0, &mut rng(53));
    let (r, b) = derain(&p, &image).unwrap();
    assert!(r.data().iter().all(|&v| v == 0.0));
    assert!(b.bitwise_eq(&image));

    let zero = DcsfnParams::<Tensor<f64>>::zeros(&c).unwrap();
    let (r, b) = derain(&zero, &image).unwrap();
    assert!(r.data().iter().all(|&v| v == 0.0));
    assert!(b.bitwise_eq(&image));
}

#[test]
fn output_matches_input_size() {
    let c = cfg("tiny,K=2");
    let p = DcsfnParams::<Tensor<f32>>::init(&c, 54).unwrap();
    for (h, w) in [(8, 8), (16, 24), (32, 8)] {
        let image = Tensor::<f32>::full(Shape::new(1, 3, h, w), 0.5);
        let (r, b) = derain(&p, &image).unwrap();
        assert_eq!(r.shape(), image.shape());
        assert_eq!(b.shape(), image.shape());
    }
}

#[test]
fn forward_rejects_bad_images() {
    let c = cfg("tiny");
    let p = DcsfnParams::<Tensor<f32>>::init(&c, 55).unwrap();
    assert!(derain(&p, &Tensor::zeros(Shape::new(1, 3, 12, 16))).is_err());
    assert!(derain(&p, &Tensor::zeros(Shape::new(1, 1, 16, 16))).is_err());
}

#[test]
fn every_parameter_receives_a_gradient() {
    let c = cfg("tiny");
    let p: P = random_params(&c, 56);
    let image: Tensor<f64> = uniform(Shape::new(1, 3, 16, 16), 0.0, 1.0, &mut rng(57));
    let mut tape = Tape::new();
    let b = p.bind(&mut tape, true);
    let x = tape.constant(image);
    let out = dcsfn_forward(&mut tape, x, &b).unwrap();
    let sq = tape.mul(out.background, out.background).unwrap();
    let loss = tape.mean(sq).unwrap();
    let grads = tape.backward(loss).unwrap();
    assert_eq!(grads.len(), p.named().len());
    assert!(common::dead_parameters(&b, &grads).is_empty());
}

#[test]
fn parameter_count_depends_only_on_config() {
    let c = cfg("tiny");
    let a = DcsfnParams::<Tensor<f32>>::init(&c, 1).unwrap();
    let b = DcsfnParams::<Tensor<f32>>::init(&c, 2).unwrap();
    assert_eq!(a.param_count(), b.param_count());
    assert_eq!(a.param_count(), dcsfn::model::param_count(&c).unwrap());
    assert_ne!(a, b);
    assert_eq!(a, DcsfnParams::init(&c, 1).unwrap());
}
