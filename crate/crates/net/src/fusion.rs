//! The three unpaired-feature fusion operations.
//!
//! Each takes the main-branch intermediate feature and the auxiliary-branch
//! feature of the same stage and produces a fused feature of identical
//! shape, so the stages compose uniformly for every fusion kind.

use uniqa_tensor::{Scalar, Tape, Var};

use crate::error::NetError;
use crate::params::{BottleneckParams, BottleneckVars, FebParams, FebVars, MafeParams, MafeVars};

/// Two 3x3 convolutions, each followed by ReLU; spatial size preserved.
pub fn feb_forward<S: Scalar>(
    tape: &mut Tape<'_, S>,
    params: &FebParams<S>,
    vars: FebVars,
    x: Var,
) -> Result<Var, NetError> {
    let c1 = params.conv1.apply(tape, vars.conv1, x)?;
    let r1 = tape.relu(c1);
    let c2 = params.conv2.apply(tape, vars.conv2, r1)?;
    Ok(tape.relu(c2))
}

/// Parameter-free fusion: per-channel cosine similarity between the two
/// features weights the reference contribution, out = f_d + s * f_er.
pub fn cosine_fusion<S: Scalar>(
    tape: &mut Tape<'_, S>,
    f_d: Var,
    f_er: Var,
) -> Result<Var, NetError> {
    let s = tape.channel_cosine(f_d, f_er)?;
    let weighted = tape.channel_mul(s, f_er)?;
    Ok(tape.add(f_d, weighted)?)
}

/// Learned fusion with no structural prior: concatenate along channels and
/// reduce back with a 1x1 bottleneck.
pub fn bottleneck_fusion<S: Scalar>(
    tape: &mut Tape<'_, S>,
    params: &BottleneckParams<S>,
    vars: BottleneckVars,
    f_d: Var,
    f_er: Var,
) -> Result<Var, NetError> {
    let cat = tape.concat_channels(f_d, f_er)?;
    params.fuse.apply(tape, vars.fuse, cat)
}

/// The mutual-attention vector: 1x1 conv + ReLU on each feature, channel
/// concatenation, global average pooling to a 2C vector, and a single
/// squeeze layer with sigmoid gating down to C entries in (0, 1).
pub fn mafe_attention<S: Scalar>(
    tape: &mut Tape<'_, S>,
    params: &MafeParams<S>,
    vars: MafeVars,
    f_d: Var,
    f_er: Var,
) -> Result<Var, NetError> {
    let u = params.pre_d.apply(tape, vars.pre_d, f_d)?;
    let u = tape.relu(u);
    let v = params.pre_er.apply(tape, vars.pre_er, f_er)?;
    let v = tape.relu(v);
    let cat = tape.concat_channels(u, v)?;
    let pooled = tape.global_avg_pool(cat)?;
    let squeezed = tape.linear(pooled, vars.squeeze.weight, vars.squeeze.bias)?;
    Ok(tape.sigmoid(squeezed))
}

/// Mutual-attention fusion: the attention vector multiplies the main-branch
/// feature channel-wise. The attention replaces the feature scale rather
/// than adding a residual.
pub fn mafe_fusion<S: Scalar>(
    tape: &mut Tape<'_, S>,
    params: &MafeParams<S>,
    vars: MafeVars,
    f_d: Var,
    f_er: Var,
) -> Result<Var, NetError> {
    let attention = mafe_attention(tape, params, vars, f_d, f_er)?;
    Ok(tape.channel_mul(attention, f_d)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use uniqa_tensor::Tensor;

    fn map(c: usize, h: usize, w: usize, f: impl Fn(usize) -> f64) -> Tensor<f64> {
        Tensor::from_fn(vec![c, h, w], f)
    }

    #[test]
    fn cosine_fusion_identical_inputs_doubles() {
        let f = map(2, 2, 2, |i| 0.5 + i as f64);
        let mut tape = Tape::new();
        let fd = tape.leaf(&f);
        let fer = tape.leaf(&f);
        let out = cosine_fusion(&mut tape, fd, fer).unwrap();
        let expect: Vec<f64> = f.data().iter().map(|v| 2.0 * v).collect();
        assert_eq!(tape.value(out).data(), expect.as_slice());
    }

    #[test]
    fn cosine_fusion_negated_reference_doubles() {
        let f = map(2, 2, 2, |i| 0.5 + i as f64);
        let neg = map(2, 2, 2, |i| -(0.5 + i as f64));
        let mut tape = Tape::new();
        let fd = tape.leaf(&f);
        let fer = tape.leaf(&neg);
        let out = cosine_fusion(&mut tape, fd, fer).unwrap();
        let expect: Vec<f64> = f.data().iter().map(|v| 2.0 * v).collect();
        assert_eq!(tape.value(out).data(), expect.as_slice());
    }

    #[test]
    fn cosine_fusion_orthogonal_reference_is_identity() {
        // channel 0 of f_er orthogonal to channel 0 of f_d
        let f = Tensor::new(vec![1, 2, 2], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let er = Tensor::new(vec![1, 2, 2], vec![0.0, 1.0, 0.0, 0.0]).unwrap();
        let mut tape = Tape::new();
        let fd = tape.leaf(&f);
        let fer = tape.leaf(&er);
        let out = cosine_fusion(&mut tape, fd, fer).unwrap();
        assert_eq!(tape.value(out).data(), f.data());
    }

    #[test]
    fn bottleneck_projection_kernel_selects_main_feature() {
        let c = 3;
        let mut params = BottleneckParams::<f64>::kaiming(c, &mut ChaCha8Rng::seed_from_u64(1));
        // weight [C, 2C, 1, 1] selecting channel i from the first half
        let mut w = vec![0.0; c * 2 * c];
        for i in 0..c {
            w[i * 2 * c + i] = 1.0;
        }
        params.fuse.weight = Tensor::new(vec![c, 2 * c, 1, 1], w).unwrap().with_grad();
        params.fuse.bias = Tensor::zeros(vec![c]).with_grad();

        let f = map(c, 2, 2, |i| i as f64 * 0.25 - 1.0);
        let er = map(c, 2, 2, |i| (i as f64).cos());
        let mut tape = Tape::new();
        let vars = params.bind(&mut tape);
        let fd = tape.leaf(&f);
        let fer = tape.leaf(&er);
        let out = bottleneck_fusion(&mut tape, &params, vars, fd, fer).unwrap();
        assert_eq!(tape.value(out).data(), f.data());
    }

    #[test]
    fn bottleneck_zero_weights_gives_bias_planes() {
        let c = 2;
        let mut params = BottleneckParams::<f64>::kaiming(c, &mut ChaCha8Rng::seed_from_u64(2));
        params.fuse.weight = Tensor::zeros(vec![c, 2 * c, 1, 1]).with_grad();
        params.fuse.bias = Tensor::new(vec![c], vec![0.75, -1.5]).unwrap().with_grad();
        let f = map(c, 2, 2, |i| i as f64);
        let mut tape = Tape::new();
        let vars = params.bind(&mut tape);
        let fd = tape.leaf(&f);
        let fer = tape.leaf(&f);
        let out = bottleneck_fusion(&mut tape, &params, vars, fd, fer).unwrap();
        assert_eq!(
            tape.value(out).data(),
            &[0.75, 0.75, 0.75, 0.75, -1.5, -1.5, -1.5, -1.5]
        );
    }

    #[test]
    fn mafe_zero_squeeze_halves_the_main_feature() {
        let c = 2;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut params = MafeParams::<f64>::kaiming(c, &mut rng);
        params.squeeze = LinearZeros::zeros(c);
        let f = map(c, 2, 2, |i| 1.0 + i as f64);
        let er = map(c, 2, 2, |i| (i as f64 * 0.7).sin());
        let mut tape = Tape::new();
        let vars = params.bind(&mut tape);
        let fd = tape.leaf(&f);
        let fer = tape.leaf(&er);
        let out = mafe_fusion(&mut tape, &params, vars, fd, fer).unwrap();
        let expect: Vec<f64> = f.data().iter().map(|v| 0.5 * v).collect();
        assert_eq!(tape.value(out).data(), expect.as_slice());
    }

    // local alias so the test reads cleanly
    struct LinearZeros;
    impl LinearZeros {
        fn zeros(c: usize) -> crate::params::LinearParams<f64> {
            crate::params::LinearParams::zeros(c, 2 * c)
        }
    }

    #[test]
    fn mafe_saturated_bias_passes_feature_through() {
        let c = 2;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut params = MafeParams::<f64>::kaiming(c, &mut rng);
        params.squeeze.weight = Tensor::zeros(vec![c, 2 * c]).with_grad();
        params.squeeze.bias = Tensor::filled(vec![c], 50.0).with_grad();
        let f = map(c, 2, 2, |i| 1.0 + i as f64 * 0.3);
        let er = map(c, 2, 2, |i| (i as f64 * 0.9).cos());
        let mut tape = Tape::new();
        let vars = params.bind(&mut tape);
        let fd = tape.leaf(&f);
        let fer = tape.leaf(&er);
        let out = mafe_fusion(&mut tape, &params, vars, fd, fer).unwrap();
        for (got, want) in tape.value(out).data().iter().zip(f.data().iter()) {
            assert!((got - want).abs() < 1e-15);
        }
    }

    #[test]
    fn feb_zero_params_zero_output() {
        let feb = FebParams::<f64> {
            conv1: crate::params::ConvParams::zeros(3, 2, 3),
            conv2: crate::params::ConvParams::zeros(3, 3, 3),
        };
        let x = map(2, 4, 4, |i| i as f64);
        let mut tape = Tape::new();
        let vars = feb.bind(&mut tape);
        let xv = tape.leaf(&x);
        let out = feb_forward(&mut tape, &feb, vars, xv).unwrap();
        assert_eq!(tape.value(out).dims(), &[3, 4, 4]);
        assert!(tape.value(out).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn feb_identity_kernels_preserve_nonnegative_input() {
        let c = 2;
        let ident = |c: usize| {
            let mut w = vec![0.0; c * c * 9];
            for i in 0..c {
                w[(i * c + i) * 9 + 4] = 1.0;
            }
            crate::params::ConvParams::<f64> {
                weight: Tensor::new(vec![c, c, 3, 3], w).unwrap().with_grad(),
                bias: Tensor::zeros(vec![c]).with_grad(),
            }
        };
        let feb = FebParams {
            conv1: ident(c),
            conv2: ident(c),
        };
        let x = map(c, 3, 3, |i| i as f64 * 0.5);
        let mut tape = Tape::new();
        let vars = feb.bind(&mut tape);
        let xv = tape.leaf(&x);
        let out = feb_forward(&mut tape, &feb, vars, xv).unwrap();
        assert_eq!(tape.value(out).data(), x.data());
    }
}
