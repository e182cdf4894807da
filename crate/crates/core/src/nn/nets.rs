//! The three networks: encoder (variational parameters), auxiliary encoder
//! (prior parameters and skip tensors), decoder (observation-model
//! parameters), all built from the layer primitives.
//!
//! Layer scheme for `n_lay` layers: one stride-1 convolution at full
//! resolution, `n_lay - 2` stride-2 convolutions, and a final fully
//! connected map. The decoder mirrors it in reverse with transposed
//! convolutions. A dropout layer precedes every other layer.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::forward::ForwardPass;
use crate::nn::layers::{ConvLayer, DropoutLayer, LinearLayer, NormLayer};
use crate::nn::params::ParamStore;
use crate::tensor::TensorId;

/// Variational sigma floor; softplus output plus this stays away from zero.
pub const SIGMA_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct ConvStage {
    pub conv: ConvLayer,
    pub norm: NormLayer,
}

impl ConvStage {
    fn forward(&self, pass: &mut ForwardPass, x: TensorId, dropout: DropoutLayer) -> Result<TensorId> {
        let x = dropout.forward(pass, x)?;
        let x = self.conv.forward(pass, x)?;
        let x = self.norm.forward(pass, x)?;
        Ok(pass.tape.softplus(x))
    }
}

/// Convolutional stack shared by both encoders.
#[derive(Debug, Clone)]
pub struct EncoderNet {
    pub stages: Vec<ConvStage>,
    pub fc: LinearLayer,
    pub dropout: DropoutLayer,
    pub latent_dim: usize,
    pub in_ch: usize,
}

pub struct EncoderBuild<'a> {
    pub store: &'a mut ParamStore,
    pub prefix: &'a str,
    pub in_ch: usize,
    pub channels: usize,
    pub n_lay: usize,
    pub latent_dim: usize,
    pub kernel: usize,
    pub grid: (usize, usize),
    pub dropout: f64,
}

impl EncoderNet {
    pub fn build(cfg: EncoderBuild, rng: &mut ChaCha8Rng) -> Self {
        let EncoderBuild { store, prefix, in_ch, channels, n_lay, latent_dim, kernel, grid, dropout } =
            cfg;
        let mut stages = Vec::new();
        let mut ch = in_ch;
        for i in 0..n_lay - 1 {
            let stride = if i == 0 { 1 } else { 2 };
            let conv = ConvLayer::build(
                store,
                &format!("{prefix}.conv{i}"),
                ch,
                channels,
                kernel,
                stride,
                false,
                rng,
            );
            let norm = NormLayer::build(store, &format!("{prefix}.norm{i}"), channels);
            stages.push(ConvStage { conv, norm });
            ch = channels;
        }
        let down = 1 << (n_lay - 2);
        let flat = channels * (grid.0 / down) * (grid.1 / down);
        let fc = LinearLayer::build(store, &format!("{prefix}.fc"), flat, 2 * latent_dim, rng);
        EncoderNet {
            stages,
            fc,
            dropout: DropoutLayer { p: dropout },
            latent_dim,
            in_ch,
        }
    }

    /// Returns (mu, sigma), each [B, d], with sigma strictly positive, and
    /// the per-stage intermediate tensors (after activation).
    pub fn forward_with_intermediates(
        &self,
        pass: &mut ForwardPass,
        x: TensorId,
    ) -> Result<(TensorId, TensorId, Vec<TensorId>)> {
        let shape = pass.tape.shape(x).to_vec();
        if shape.len() != 4 || shape[1] != self.in_ch {
            return Err(Error::Shape(format!(
                "encoder expects [B, {}, W, H], got {:?}",
                self.in_ch, shape
            )));
        }
        let mut h = x;
        let mut intermediates = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            h = stage.forward(pass, h, self.dropout)?;
            intermediates.push(h);
        }
        let b = pass.tape.shape(h)[0];
        let flat: usize = pass.tape.shape(h)[1..].iter().product();
        let h = self.dropout.forward(pass, h)?;
        let h = pass.tape.reshape(h, vec![b, flat])?;
        let out = self.fc.forward(pass, h)?;
        let d = self.latent_dim;
        let mu = pass.tape.narrow(out, 1, 0, d)?;
        let s = pass.tape.narrow(out, 1, d, d)?;
        let sp = pass.tape.softplus(s);
        let sigma = pass.tape.add_scalar(sp, SIGMA_FLOOR);
        Ok((mu, sigma, intermediates))
    }

    pub fn forward(&self, pass: &mut ForwardPass, x: TensorId) -> Result<(TensorId, TensorId)> {
        let (mu, sigma, _) = self.forward_with_intermediates(pass, x)?;
        Ok((mu, sigma))
    }
}

/// Decoder stage: optional skip concatenation, then a transposed convolution.
#[derive(Debug, Clone)]
pub struct DecoderStage {
    pub conv: ConvLayer,
    /// None on the final stage, whose raw output parameterizes the
    /// observation model.
    pub norm: Option<NormLayer>,
    /// Channels taken from the paired auxiliary intermediate (0 = no skip).
    pub skip_take: usize,
}

#[derive(Debug, Clone)]
pub struct DecoderNet {
    pub fc: LinearLayer,
    pub fc_norm: NormLayer,
    pub stages: Vec<DecoderStage>,
    pub dropout: DropoutLayer,
    pub base_channels: usize,
    pub base_grid: (usize, usize),
    pub latent_dim: usize,
}

pub struct DecoderBuild<'a> {
    pub store: &'a mut ParamStore,
    pub prefix: &'a str,
    pub latent_dim: usize,
    /// Output channels of the FC stage and of each stride-2 stage;
    /// length n_lay - 1. The final stride-1 stage emits `out_params`.
    pub channels: &'a [usize],
    /// Skip widths per stage; length n_lay - 1; zeros disable.
    pub skips: &'a [usize],
    pub out_params: usize,
    pub n_lay: usize,
    pub kernel: usize,
    pub grid: (usize, usize),
    pub dropout: f64,
}

impl DecoderNet {
    pub fn build(cfg: DecoderBuild, rng: &mut ChaCha8Rng) -> Self {
        let DecoderBuild {
            store,
            prefix,
            latent_dim,
            channels,
            skips,
            out_params,
            n_lay,
            kernel,
            grid,
            dropout,
        } = cfg;
        assert_eq!(channels.len(), n_lay - 1, "decoder channel list length");
        assert_eq!(skips.len(), n_lay - 1, "decoder skip list length");
        let down = 1 << (n_lay - 2);
        let base_grid = (grid.0 / down, grid.1 / down);
        let base_channels = channels[0];
        let fc = LinearLayer::build(
            store,
            &format!("{prefix}.fc"),
            latent_dim,
            base_channels * base_grid.0 * base_grid.1,
            rng,
        );
        let fc_norm = NormLayer::build(store, &format!("{prefix}.norm_fc"), base_channels);
        let mut stages = Vec::new();
        let mut ch = base_channels;
        for i in 0..n_lay - 1 {
            let last = i == n_lay - 2;
            let out_ch = if last { out_params } else { channels[i + 1] };
            let stride = if last { 1 } else { 2 };
            let in_ch = ch + skips[i];
            let conv = ConvLayer::build(
                store,
                &format!("{prefix}.tconv{i}"),
                in_ch,
                out_ch,
                kernel,
                stride,
                true,
                rng,
            );
            let norm = if last {
                None
            } else {
                Some(NormLayer::build(store, &format!("{prefix}.norm{i}"), out_ch))
            };
            stages.push(DecoderStage { conv, norm, skip_take: skips[i] });
            ch = out_ch;
        }
        DecoderNet {
            fc,
            fc_norm,
            stages,
            dropout: DropoutLayer { p: dropout },
            base_channels,
            base_grid,
            latent_dim,
        }
    }

    /// z: [N, d]; skips: auxiliary intermediates ordered coarsest-last (the
    /// encoder's own order), already expanded to N rows; None when skip
    /// connections are disabled. Output: [N, out_params, W, H].
    pub fn forward(
        &self,
        pass: &mut ForwardPass,
        z: TensorId,
        skips: Option<&[TensorId]>,
    ) -> Result<TensorId> {
        let zshape = pass.tape.shape(z).to_vec();
        if zshape.len() != 2 || zshape[1] != self.latent_dim {
            return Err(Error::Shape(format!(
                "decoder expects z [N, {}], got {:?}",
                self.latent_dim, zshape
            )));
        }
        let n = zshape[0];
        let h = self.dropout.forward(pass, z)?;
        let h = self.fc.forward(pass, h)?;
        let h = pass.tape.reshape(
            h,
            vec![n, self.base_channels, self.base_grid.0, self.base_grid.1],
        )?;
        let h = self.fc_norm.forward(pass, h)?;
        let mut h = pass.tape.softplus(h);
        let n_stages = self.stages.len();
        for (i, stage) in self.stages.iter().enumerate() {
            if stage.skip_take > 0 {
                let skips = skips.ok_or_else(|| {
                    Error::Shape("decoder built with skips but none supplied".into())
                })?;
                // stage i runs at the spatial scale of intermediate
                // n_stages-1-i (intermediates are ordered fine-to-coarse)
                let inter = skips[n_stages - 1 - i];
                let part = pass.tape.narrow(inter, 1, 0, stage.skip_take)?;
                h = pass.tape.concat(&[h, part], 1)?;
            }
            h = self.dropout.forward(pass, h)?;
            h = stage.conv.forward(pass, h)?;
            if let Some(norm) = &stage.norm {
                h = norm.forward(pass, h)?;
                h = pass.tape.softplus(h);
            }
        }
        Ok(h)
    }
}
