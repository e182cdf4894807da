//! Layer primitives: convolutions, batch normalization, dropout, linear maps.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::nn::forward::{dropout_mask, ForwardPass};
use crate::nn::params::{ParamId, ParamStore};
use crate::tensor::{TensorId, TensorValue};

/// Uniform init with scale 1/sqrt(fan_in); biases start at zero.
pub fn uniform_init(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> TensorValue {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let numel: usize = shape.iter().product();
    let data: Vec<f64> = (0..numel).map(|_| rng.random_range(-bound..bound)).collect();
    TensorValue::new(shape.to_vec(), data).expect("shape matches")
}

/// A (possibly transposed) 2-D convolution with square kernel.
#[derive(Debug, Clone)]
pub struct ConvLayer {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub transposed: bool,
    pub in_ch: usize,
    pub out_ch: usize,
}

impl ConvLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn build(
        store: &mut ParamStore,
        prefix: &str,
        in_ch: usize,
        out_ch: usize,
        kernel_size: usize,
        stride: usize,
        transposed: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let kshape = if transposed {
            vec![in_ch, out_ch, kernel_size, kernel_size]
        } else {
            vec![out_ch, in_ch, kernel_size, kernel_size]
        };
        let fan_in = in_ch * kernel_size * kernel_size;
        let kernel = store.add(
            format!("{prefix}.kernel"),
            uniform_init(&kshape, fan_in, rng),
            true,
        );
        let bias = store.add(format!("{prefix}.bias"), TensorValue::zeros(&[out_ch]), true);
        ConvLayer { kernel, bias, stride, transposed, in_ch, out_ch }
    }

    pub fn forward(&self, pass: &mut ForwardPass, x: TensorId) -> Result<TensorId> {
        let k = pass.param(self.kernel);
        let b = pass.param(self.bias);
        if self.transposed {
            pass.tape.conv_transpose2d(x, k, b, self.stride)
        } else {
            pass.tape.conv2d(x, k, b, self.stride)
        }
    }
}

/// Batch normalization over batch and spatial axes, per channel.
///
/// Training mode normalizes with batch statistics and refreshes the running
/// statistics by exponential moving average; inference mode is an affine map
/// using the running statistics only.
#[derive(Debug, Clone)]
pub struct NormLayer {
    pub scale: ParamId,
    pub shift: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub eps: f64,
    pub momentum: f64,
}

impl NormLayer {
    pub fn build(store: &mut ParamStore, prefix: &str, channels: usize) -> Self {
        NormLayer {
            scale: store.add(format!("{prefix}.scale"), TensorValue::full(&[channels], 1.0), true),
            shift: store.add(format!("{prefix}.shift"), TensorValue::zeros(&[channels]), true),
            running_mean: store.add(
                format!("{prefix}.running_mean"),
                TensorValue::zeros(&[channels]),
                false,
            ),
            running_var: store.add(
                format!("{prefix}.running_var"),
                TensorValue::full(&[channels], 1.0),
                false,
            ),
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    /// Input [N, C, W, H].
    pub fn forward(&self, pass: &mut ForwardPass, x: TensorId) -> Result<TensorId> {
        let c = pass.tape.shape(x)[1];
        let normalized = if pass.is_train() {
            let m = pass.tape.mean(x, &[0, 2, 3], true)?;
            let d = pass.tape.sub(x, m)?;
            let d2 = pass.tape.mul(d, d)?;
            let v = pass.tape.mean(d2, &[0, 2, 3], true)?;
            self.push_running_updates(pass, m, v, c);
            let veps = pass.tape.add_scalar(v, self.eps);
            let std = pass.tape.sqrt(veps)?;
            pass.tape.div(d, std)?
        } else {
            let rm = pass.param_value(self.running_mean).clone();
            let rv = pass.param_value(self.running_var).clone();
            let denom: Vec<f64> = rv.data().iter().map(|v| (v + self.eps).sqrt()).collect();
            let rm = pass.constant(rm.reshaped(vec![1, c, 1, 1])?);
            let sd = pass.constant(TensorValue::new(vec![1, c, 1, 1], denom)?);
            let d = pass.tape.sub(x, rm)?;
            pass.tape.div(d, sd)?
        };
        let scale = pass.param(self.scale);
        let scale = pass.tape.reshape(scale, vec![1, c, 1, 1])?;
        let shift = pass.param(self.shift);
        let shift = pass.tape.reshape(shift, vec![1, c, 1, 1])?;
        let scaled = pass.tape.mul(normalized, scale)?;
        pass.tape.add(scaled, shift)
    }

    fn push_running_updates(&self, pass: &mut ForwardPass, m: TensorId, v: TensorId, c: usize) {
        let mom = self.momentum;
        let old_m = pass.param_value(self.running_mean).data().to_vec();
        let old_v = pass.param_value(self.running_var).data().to_vec();
        let new_m: Vec<f64> = old_m
            .iter()
            .zip(pass.tape.value(m).data())
            .map(|(o, b)| (1.0 - mom) * o + mom * b)
            .collect();
        let new_v: Vec<f64> = old_v
            .iter()
            .zip(pass.tape.value(v).data())
            .map(|(o, b)| (1.0 - mom) * o + mom * b)
            .collect();
        pass.stat_updates.push((
            self.running_mean,
            TensorValue::new(vec![c], new_m).expect("shape"),
        ));
        pass.stat_updates.push((
            self.running_var,
            TensorValue::new(vec![c], new_v).expect("shape"),
        ));
    }
}

/// Inverted dropout: identity in inference, zero-or-rescale in training.
#[derive(Debug, Clone, Copy)]
pub struct DropoutLayer {
    pub p: f64,
}

impl DropoutLayer {
    pub fn forward(&self, pass: &mut ForwardPass, x: TensorId) -> Result<TensorId> {
        if self.p <= 0.0 {
            return Ok(x);
        }
        match pass.next_dropout_rng() {
            None => Ok(x),
            Some(mut rng) => {
                let shape = pass.tape.shape(x).to_vec();
                let mask = dropout_mask(&shape, self.p, &mut rng);
                let m = pass.constant(mask);
                pass.tape.mul(x, m)
            }
        }
    }
}

/// Affine map on the last axis of a [N, in] tensor.
#[derive(Debug, Clone)]
pub struct LinearLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_features: usize,
    pub out_features: usize,
}

impl LinearLayer {
    pub fn build(
        store: &mut ParamStore,
        prefix: &str,
        in_features: usize,
        out_features: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let weight = store.add(
            format!("{prefix}.weight"),
            uniform_init(&[in_features, out_features], in_features, rng),
            true,
        );
        let bias = store.add(
            format!("{prefix}.bias"),
            TensorValue::zeros(&[out_features]),
            true,
        );
        LinearLayer { weight, bias, in_features, out_features }
    }

    pub fn forward(&self, pass: &mut ForwardPass, x: TensorId) -> Result<TensorId> {
        let w = pass.param(self.weight);
        let b = pass.param(self.bias);
        let y = pass.tape.matmul(x, w)?;
        pass.tape.add(y, b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::forward::Mode;
    use crate::rng;

    #[test]
    fn norm_layer_training_output_is_standardized() {
        let mut store = ParamStore::new();
        let norm = NormLayer::build(&mut store, "bn", 3);
        let mut pass = ForwardPass::new(&store, Mode::Train { seed: 1, epoch: 0, batch: 0 });
        let mut r = rng::stream(5, &[1]);
        let x = TensorValue::new(
            vec![4, 3, 6, 5],
            (0..4 * 3 * 6 * 5).map(|_| r.random_range(-3.0..5.0)).collect(),
        )
        .unwrap();
        let xi = pass.constant(x);
        // scale = 1, shift = 0 at init, so the output is the normalized value
        let y = norm.forward(&mut pass, xi).unwrap();
        let out = pass.tape.value(y);
        for c in 0..3 {
            let mut vals = Vec::new();
            for n in 0..4 {
                for s in 0..30 {
                    vals.push(out.data()[(n * 3 + c) * 30 + s]);
                }
            }
            let mean: f64 = vals.iter().sum::<f64>() / vals.len() as f64;
            let var: f64 = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
                / vals.len() as f64;
            assert!(mean.abs() < 1e-6, "channel {c} mean {mean}");
            assert!((var - 1.0).abs() < 1e-4, "channel {c} var {var}");
        }
    }

    #[test]
    fn norm_layer_inference_is_deterministic_affine() {
        let mut store = ParamStore::new();
        let norm = NormLayer::build(&mut store, "bn", 2);
        store
            .set_value(
                store.id("bn.running_mean").unwrap(),
                TensorValue::from_vec(vec![1.0, -2.0]),
            )
            .unwrap();
        store
            .set_value(
                store.id("bn.running_var").unwrap(),
                TensorValue::from_vec(vec![4.0, 0.25]),
            )
            .unwrap();
        let x = TensorValue::new(vec![1, 2, 1, 2], vec![3.0, 5.0, -1.0, 0.0]).unwrap();
        let run = || {
            let mut pass = ForwardPass::new(&store, Mode::Eval);
            let xi = pass.constant(x.clone());
            let y = norm.forward(&mut pass, xi).unwrap();
            pass.tape.value(y).data().to_vec()
        };
        let a = run();
        let b = run();
        assert_eq!(a, b);
        // (3 - 1)/sqrt(4 + 1e-5) for the first entry
        assert!((a[0] - 2.0 / (4.0f64 + 1e-5).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn norm_layer_updates_running_stats_with_momentum() {
        let mut store = ParamStore::new();
        let norm = NormLayer::build(&mut store, "bn", 1);
        let mut pass = ForwardPass::new(&store, Mode::Train { seed: 1, epoch: 0, batch: 0 });
        let x = TensorValue::new(vec![1, 1, 1, 2], vec![2.0, 4.0]).unwrap();
        let xi = pass.constant(x);
        norm.forward(&mut pass, xi).unwrap();
        let updates = pass.take_stat_updates();
        assert_eq!(updates.len(), 2);
        // batch mean 3, old 0, momentum 0.1 -> 0.3
        assert!((updates[0].1.data()[0] - 0.3).abs() < 1e-12);
        // batch var 1, old 1 -> unchanged
        assert!((updates[1].1.data()[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn dropout_inference_is_identity() {
        let store = ParamStore::new();
        let mut pass = ForwardPass::new(&store, Mode::Eval);
        let x = pass.constant(TensorValue::from_vec(vec![1.0, 2.0, 3.0]));
        let d = DropoutLayer { p: 0.5 };
        let y = d.forward(&mut pass, x).unwrap();
        assert_eq!(x, y, "same node, no op recorded");
    }

    #[test]
    fn dropout_preserves_expectation() {
        // mean over 1e5 draws of dropout(x)/x within 1% of 1
        let p = 0.1;
        let mut r = rng::stream(2, &[3]);
        let n = 100_000;
        let mask = dropout_mask(&[n], p, &mut r);
        let mean: f64 = mask.data().iter().sum::<f64>() / n as f64;
        assert!((mean - 1.0).abs() < 0.01, "mean {mean}");
    }

    #[test]
    fn dropout_masks_are_reproducible_per_site() {
        let store = ParamStore::new();
        let x = TensorValue::from_vec(vec![1.0; 64]);
        let run = || {
            let mut pass =
                ForwardPass::new(&store, Mode::Train { seed: 9, epoch: 2, batch: 5 });
            let xi = pass.constant(x.clone());
            let d = DropoutLayer { p: 0.3 };
            let y = d.forward(&mut pass, xi).unwrap();
            pass.tape.value(y).data().to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn linear_layer_matches_manual_affine() {
        let mut store = ParamStore::new();
        let mut r = rng::stream(1, &[2]);
        let lin = LinearLayer::build(&mut store, "fc", 3, 2, &mut r);
        store
            .set_value(
                lin.weight,
                TensorValue::new(vec![3, 2], vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap(),
            )
            .unwrap();
        store
            .set_value(lin.bias, TensorValue::from_vec(vec![0.5, -0.5]))
            .unwrap();
        let mut pass = ForwardPass::new(&store, Mode::Eval);
        let x = pass.constant(TensorValue::new(vec![1, 3], vec![2.0, 3.0, 4.0]).unwrap());
        let y = lin.forward(&mut pass, x).unwrap();
        assert_eq!(pass.tape.value(y).data(), &[2.0 + 4.0 + 0.5, 3.0 + 4.0 - 0.5]);
    }
}
