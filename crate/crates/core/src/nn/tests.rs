// SPDX-License-Identifier: Apache-2.0

use super::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape, 1.0, rng)
}

/// Checks the analytic input and parameter gradients of `L = sum(r * f(x))`
/// against central differences.
fn check_layer<L: Layer>(layer: &L, params: &mut ParameterSet, x: &Tensor, seed: u64, train: bool) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eval = |p: &ParameterSet, x: &Tensor| -> Tensor {
        let mut drop_rng = ChaCha8Rng::seed_from_u64(99);
        let mut ctx = if train { ForwardCtx::train(&mut drop_rng) } else { ForwardCtx::infer() };
        layer.forward(p, x, &mut ctx).unwrap().0
    };
    let y = eval(params, x);
    let r = random(&y.shape, &mut rng);
    let loss = |p: &ParameterSet, x: &Tensor| -> f64 { eval(p, x).data.iter().zip(&r.data).map(|(a, b)| a * b).sum() };

    params.zero_grads();
    let mut drop_rng = ChaCha8Rng::seed_from_u64(99);
    let mut ctx = if train { ForwardCtx::train(&mut drop_rng) } else { ForwardCtx::infer() };
    let (_, cache) = layer.forward(params, x, &mut ctx).unwrap();
    let dx = layer.backward(params, &cache, &r).unwrap();

    let h = 1e-5;
    let mut fd = vec![0.0; x.len()];
    for i in 0..x.len() {
        let mut up = x.clone();
        let mut dn = x.clone();
        up.data[i] += h;
        dn.data[i] -= h;
        fd[i] = (loss(params, &up) - loss(params, &dn)) / (2.0 * h);
    }
    assert_close(&dx.data, &fd, "input");
    let names: Vec<String> = params.values.keys().cloned().collect();
    for name in names {
        let analytic = params.grads[&name].data.clone();
        let mut numeric = vec![0.0; analytic.len()];
        for i in 0..analytic.len() {
            let orig = params.values[&name].data[i];
            params.values.get_mut(&name).unwrap().data[i] = orig + h;
            let up = loss(params, x);
            params.values.get_mut(&name).unwrap().data[i] = orig - h;
            let dn = loss(params, x);
            params.values.get_mut(&name).unwrap().data[i] = orig;
            numeric[i] = (up - dn) / (2.0 * h);
        }
        assert_close(&analytic, &numeric, &name);
    }
}

fn assert_close(a: &[f64], b: &[f64], what: &str) {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    // gradients that vanish identically (attention key bias, conv bias ahead of
    // batch norm) leave only rounding noise on both sides
    if na.max(nb) < 1e-7 {
        assert!(diff < 1e-7, "{what}: absolute error {diff}");
        return;
    }
    let rel = diff / na.max(nb);
    assert!(rel < 1e-4, "{what}: relative error {rel}");
}

#[test]
fn dense_closed_form_gradient() {
    // L = 1/2 |W x - y|^2 with W stored [in, out]
    let mut params = ParameterSet::default();
    let dense = Dense::new("d", 3, 2);
    params.insert("d.weight", Tensor::new(vec![3, 2], vec![1.0, -1.0, 0.5, 2.0, -0.3, 0.7]).unwrap());
    params.insert("d.bias", Tensor::zeros(&[2]));
    let x = Tensor::new(vec![1, 3], vec![0.2, -1.0, 3.0]).unwrap();
    let target = [0.5, -0.25];
    let (out, cache) = dense.forward(&params, &x, &mut ForwardCtx::infer()).unwrap();
    let resid: Vec<f64> = out.data.iter().zip(target).map(|(o, t)| o - t).collect();
    dense.backward(&mut params, &cache, &Tensor::new(vec![1, 2], resid.clone()).unwrap()).unwrap();
    let gw = &params.grads["d.weight"].data;
    for i in 0..3 {
        for j in 0..2 {
            assert!((gw[i * 2 + j] - resid[j] * x.data[i]).abs() < 1e-15);
        }
    }
}

#[test]
fn zero_output_grad_gives_zero_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut params = ParameterSet::default();
    let block = ConvBlock::new("b", 4, 8, 3, true);
    block.init(&mut params, &mut rng);
    let x = random(&[2, 6, 4], &mut rng);
    let mut drng = ChaCha8Rng::seed_from_u64(2);
    let (y, cache) = block.forward(&params, &x, &mut ForwardCtx::train(&mut drng)).unwrap();
    let dx = block.backward(&mut params, &cache, &Tensor::zeros(&y.shape)).unwrap();
    assert!(dx.data.iter().all(|&v| v == 0.0));
    assert!(params.grads.values().all(|g| g.data.iter().all(|&v| v == 0.0)));
}

#[test]
fn identity_kernel_conv_block_is_max_pool() {
    let mut params = ParameterSet::default();
    let block = ConvBlock::new("b", 1, 1, 3, false);
    params.insert("b.conv.weight", Tensor::new(vec![3, 1], vec![0.0, 1.0, 0.0]).unwrap());
    params.insert("b.conv.bias", Tensor::zeros(&[1]));
    let x = Tensor::new(vec![1, 6, 1], vec![1.0, 5.0, 2.0, 3.0, 9.0, 4.0]).unwrap();
    let (y, _) = block.forward(&params, &x, &mut ForwardCtx::infer()).unwrap();
    assert_eq!(y.shape, vec![1, 3, 1]);
    assert_eq!(y.data, vec![5.0, 3.0, 9.0]);
}

#[test]
fn zero_input_zero_output() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut params = ParameterSet::default();
    let block = ConvBlock::new("b", 13, 64, 3, false);
    block.init(&mut params, &mut rng);
    let x = Tensor::zeros(&[2, 24, 13]);
    let (y, _) = block.forward(&params, &x, &mut ForwardCtx::infer()).unwrap();
    assert!(y.data.iter().all(|&v| v == 0.0));
}

#[test]
fn conv_block_shapes() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut params = ParameterSet::default();
    let b1 = ConvBlock::new("b1", 13, 64, 3, true);
    let b2 = ConvBlock::new("b2", 64, 64, 3, true);
    b1.init(&mut params, &mut rng);
    b2.init(&mut params, &mut rng);
    let x = random(&[3, 24, 13], &mut rng);
    let mut drng = ChaCha8Rng::seed_from_u64(4);
    let mut ctx = ForwardCtx::train(&mut drng);
    let (h1, _) = b1.forward(&params, &x, &mut ctx).unwrap();
    let (h2, _) = b2.forward(&params, &h1, &mut ctx).unwrap();
    assert_eq!(h1.shape, vec![3, 12, 64]);
    assert_eq!(h2.shape, vec![3, 6, 64]);
}

#[test]
fn short_sequence_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut params = ParameterSet::default();
    let block = ConvBlock::new("b", 2, 4, 3, true);
    block.init(&mut params, &mut rng);
    let x = random(&[1, 2, 2], &mut rng);
    assert!(matches!(block.forward(&params, &x, &mut ForwardCtx::infer()), Err(NnError::Shape(_))));
}

#[test]
fn positional_encoding_values() {
    let pe = positional_encoding(24, 64).unwrap();
    for i in 0..32 {
        assert_eq!(pe.data[2 * i], 0.0);
        assert_eq!(pe.data[2 * i + 1], 1.0);
    }
    assert!((pe.data[64] - 1f64.sin()).abs() < 1e-15);
    assert!((pe.data[64] - 0.841471).abs() < 1e-6);
    assert!(positional_encoding(4, 7).is_err());
}

fn identity_attention(d: usize, heads: usize) -> (MultiHeadAttention, ParameterSet) {
    let mha = MultiHeadAttention::new("a", d, heads).unwrap();
    let mut params = ParameterSet::default();
    let mut eye = vec![0.0; d * d];
    for i in 0..d {
        eye[i * d + i] = 1.0;
    }
    for name in ["query", "key", "value", "output"] {
        params.insert(format!("a.{name}.weight"), Tensor::new(vec![d, d], eye.clone()).unwrap());
        params.insert(format!("a.{name}.bias"), Tensor::zeros(&[d]));
    }
    (mha, params)
}

#[test]
fn identical_keys_average_values() {
    let (mha, mut params) = identity_attention(2, 1);
    params.values.get_mut("a.key.weight").unwrap().data.iter_mut().for_each(|v| *v = 0.0);
    let x = Tensor::new(vec![1, 3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 9.0]).unwrap();
    let (y, cache) = mha.forward(&params, &x, &mut ForwardCtx::infer()).unwrap();
    for row in y.data.chunks(2) {
        assert!((row[0] - 3.0).abs() < 1e-12);
        assert!((row[1] - 5.0).abs() < 1e-12);
    }
    assert!(cache.weights.iter().all(|w| (w - 1.0 / 3.0).abs() < 1e-12));
}

#[test]
fn single_token_returns_value_row() {
    let (mha, params) = identity_attention(4, 2);
    let x = Tensor::new(vec![1, 1, 4], vec![0.3, -1.0, 2.0, 7.0]).unwrap();
    let (y, _) = mha.forward(&params, &x, &mut ForwardCtx::infer()).unwrap();
    assert_eq!(y.data, x.data);
}

#[test]
fn hand_softmax_weights() {
    // T = 2, d_k = 1, query 1 at both positions, keys {0, ln 3}
    let (mha, params) = identity_attention(1, 1);
    let x = Tensor::new(vec![1, 2, 1], vec![0.0, 3f64.ln()]).unwrap();
    let mut p = params.clone();
    p.values.get_mut("a.query.weight").unwrap().data[0] = 0.0;
    p.values.get_mut("a.query.bias").unwrap().data[0] = 1.0;
    let (_, cache) = mha.forward(&p, &x, &mut ForwardCtx::infer()).unwrap();
    assert!((cache.weights[0] - 0.25).abs() < 1e-12);
    assert!((cache.weights[1] - 0.75).abs() < 1e-12);
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut m: Vec<f64> = (0..60).map(|_| rng.random_range(-30.0..30.0)).collect();
    softmax_rows(&mut m, 6);
    for row in m.chunks(6) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn divisibility_checked() {
    assert!(matches!(MultiHeadAttention::new("a", 10, 4), Err(NnError::Config(_))));
}

#[test]
fn dropout_behaviour() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = Tensor::full(&[200_000], 1.0);
    assert_eq!(dropout_apply(&x, 0.0, &mut rng, Mode::Train).unwrap(), x);
    assert_eq!(dropout_apply(&x, 0.5, &mut rng, Mode::Infer).unwrap(), x);
    let y = dropout_apply(&x, 0.2, &mut rng, Mode::Train).unwrap();
    let mean = y.data.iter().sum::<f64>() / y.len() as f64;
    assert!((mean - 1.0).abs() < 0.02, "{mean}");
    let zeros = y.data.iter().filter(|&&v| v == 0.0).count() as f64 / y.len() as f64;
    assert!((zeros - 0.2).abs() < 0.01);
    assert!(dropout_apply(&x, 1.0, &mut rng, Mode::Train).is_err());
}

#[test]
fn finite_difference_every_layer() {
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);

        let mut p = ParameterSet::default();
        let dense = Dense::new("d", 5, 3);
        dense.init(&mut p, &mut rng);
        check_layer(&dense, &mut p, &random(&[2, 4, 5], &mut rng), seed, true);

        let mut p = ParameterSet::default();
        let conv = Conv1d::new("c", 3, 4, 3);
        conv.init(&mut p, &mut rng);
        check_layer(&conv, &mut p, &random(&[2, 7, 3], &mut rng), seed, true);

        let mut p = ParameterSet::default();
        let bn = BatchNorm1d::new("bn", 3);
        bn.init(&mut p);
        check_layer(&bn, &mut p, &random(&[2, 5, 3], &mut rng), seed, true);

        let mut p = ParameterSet::default();
        check_layer(&Relu, &mut p, &random(&[2, 5, 3], &mut rng), seed, true);
        check_layer(&MaxPool1d, &mut p, &random(&[2, 6, 3], &mut rng), seed, true);
        check_layer(&GlobalAvgPool, &mut p, &random(&[2, 6, 3], &mut rng), seed, true);
        check_layer(&Dropout { rate: 0.3 }, &mut p, &random(&[2, 6, 3], &mut rng), seed, true);

        let mut p = ParameterSet::default();
        let ln = LayerNorm::new("ln", 6);
        ln.init(&mut p);
        // perturb gain/bias so the check is not at the identity
        for v in p.values.values_mut() {
            v.data.iter_mut().for_each(|x| *x += rng.random_range(-0.5..0.5));
        }
        check_layer(&ln, &mut p, &random(&[2, 3, 6], &mut rng), seed, true);

        let mut p = ParameterSet::default();
        let mha = MultiHeadAttention::new("a", 8, 2).unwrap();
        mha.init(&mut p, &mut rng);
        check_layer(&mha, &mut p, &random(&[2, 5, 8], &mut rng), seed, true);

        let mut p = ParameterSet::default();
        let enc = EncoderBlock::new("enc", 8, 2, 12, 0.25).unwrap();
        enc.init(&mut p, &mut rng);
        check_layer(&enc, &mut p, &random(&[2, 4, 8], &mut rng), seed, true);

        let mut p = ParameterSet::default();
        let block = ConvBlock::new("blk", 3, 4, 3, true);
        block.init(&mut p, &mut rng);
        check_layer(&block, &mut p, &random(&[3, 8, 3], &mut rng), seed, true);
    }
}

#[test]
fn batch_norm_infer_uses_running_stats() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut p = ParameterSet::default();
    let bn = BatchNorm1d::new("bn", 2);
    bn.init(&mut p);
    for _ in 0..200 {
        let mut x = random(&[8, 4, 2], &mut rng);
        x.data.iter_mut().enumerate().for_each(|(i, v)| *v = *v * 3.0 + if i % 2 == 0 { 10.0 } else { -4.0 });
        let (_, cache) = bn.forward(&p, &x, &mut ForwardCtx::train(&mut rng.clone())).unwrap();
        bn.update_running(&mut p, &cache).unwrap();
    }
    let mut x = random(&[64, 4, 2], &mut rng);
    x.data.iter_mut().enumerate().for_each(|(i, v)| *v = *v * 3.0 + if i % 2 == 0 { 10.0 } else { -4.0 });
    let (y, _) = bn.forward(&p, &x, &mut ForwardCtx::infer()).unwrap();
    for ch in 0..2 {
        let mean: f64 = y.data.iter().skip(ch).step_by(2).sum::<f64>() / 256.0;
        assert!(mean.abs() < 0.1, "channel {ch} mean {mean}");
    }
}

#[test]
fn forward_backward_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut p = ParameterSet::default();
        let mha = MultiHeadAttention::new("a", 8, 4).unwrap();
        mha.init(&mut p, &mut rng);
        let x = random(&[3, 6, 8], &mut rng);
        let (y, cache) = mha.forward(&p, &x, &mut ForwardCtx::train(&mut rng)).unwrap();
        let dx = mha.backward(&mut p, &cache, &y).unwrap();
        (y, dx, p)
    };
    assert_eq!(run(), run());
}
