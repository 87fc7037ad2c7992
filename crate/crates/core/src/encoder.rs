//! The trainable IMU encoder:
//! GroupNorm(2 groups: accel, gyro) → [Conv1d + ReLU] × N → MaxPool(5) →
//! GroupNorm(1 group) → GRU → final hidden state → Linear → L2-normalize.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::signal::{ImuWindow, CHANNELS};
use crate::tensor::{GruWeights, Tape, Tensor, Var};

pub const POOL_KERNEL: usize = 5;
/// Accelerometer and gyroscope are normalized as separate groups.
pub const INPUT_GROUPS: usize = 2;
pub const POST_CONV_GROUPS: usize = 1;
pub const NORMALIZE_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub n_conv_layers: usize,
    pub conv_channels: Vec<usize>,
    pub conv_kernels: Vec<usize>,
    pub conv_strides: Vec<usize>,
    pub pool_kernel: usize,
    pub gru_hidden: usize,
    pub embed_dim: usize,
    pub groupnorm_eps: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            n_conv_layers: 3,
            conv_channels: vec![32, 64, 128],
            conv_kernels: vec![10, 5, 5],
            conv_strides: vec![2, 2, 2],
            pool_kernel: POOL_KERNEL,
            gru_hidden: 128,
            embed_dim: 512,
            groupnorm_eps: 1e-5,
        }
    }
}

impl EncoderConfig {
    /// Two conv layers, 32-wide GRU and 32-dim embedding.
    pub fn small() -> Self {
        EncoderConfig {
            n_conv_layers: 2,
            conv_channels: vec![16, 32],
            conv_kernels: vec![10, 5],
            conv_strides: vec![2, 2],
            gru_hidden: 32,
            embed_dim: 32,
            ..Default::default()
        }
    }

    /// Smallest useful configuration, sized for finite-difference checks.
    pub fn tiny() -> Self {
        EncoderConfig {
            n_conv_layers: 1,
            conv_channels: vec![4],
            conv_kernels: vec![3],
            conv_strides: vec![1],
            gru_hidden: 8,
            embed_dim: 8,
            ..Default::default()
        }
    }

    pub fn with_embed_dim(mut self, d: usize) -> Self {
        self.embed_dim = d;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_conv_layers;
        if n == 0 {
            return Err(Error::Config("encoder needs at least one conv layer".into()));
        }
        for (name, list) in [
            ("conv_channels", &self.conv_channels),
            ("conv_kernels", &self.conv_kernels),
            ("conv_strides", &self.conv_strides),
        ] {
            if list.len() != n {
                return Err(Error::Config(format!("{name} has {} entries, expected {n}", list.len())));
            }
            if list.contains(&0) {
                return Err(Error::Config(format!("{name} entries must be positive")));
            }
        }
        if self.pool_kernel == 0 || self.gru_hidden == 0 || self.embed_dim == 0 {
            return Err(Error::Config("pool kernel, gru_hidden and embed_dim must be positive".into()));
        }
        if !(self.groupnorm_eps > 0.0) {
            return Err(Error::Config("groupnorm_eps must be positive".into()));
        }
        Ok(())
    }

    /// GRU steps left after the conv/pool stack for `samples` input steps.
    pub fn output_steps(&self, samples: usize) -> Result<usize> {
        let mut time = samples;
        for (i, (&k, &s)) in self.conv_kernels.iter().zip(&self.conv_strides).enumerate() {
            if time < k {
                return Err(Error::TimeCollapsed {
                    layer: format!("conv layer {}", i + 1),
                    time,
                    needed: k,
                });
            }
            time = (time - k) / s + 1;
        }
        if time < self.pool_kernel {
            return Err(Error::TimeCollapsed {
                layer: "max pool".into(),
                time,
                needed: self.pool_kernel,
            });
        }
        Ok((time - self.pool_kernel) / self.pool_kernel + 1)
    }

    /// Closed-form number of trainable scalars.
    pub fn param_count(&self) -> usize {
        let mut total = 2 * CHANNELS;
        let mut c_in = CHANNELS;
        for (&c, &k) in self.conv_channels.iter().zip(&self.conv_kernels) {
            total += c * c_in * k + c;
            c_in = c;
        }
        let h = self.gru_hidden;
        total += 2 * c_in;
        total += 3 * h * c_in + 3 * h * h + 6 * h;
        total += self.embed_dim * h + self.embed_dim;
        total
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GruParams {
    pub w_ih: Tensor,
    pub w_hh: Tensor,
    pub b_ih: Tensor,
    pub b_hh: Tensor,
}

/// Every trainable weight of the encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub input_gn_gamma: Tensor,
    pub input_gn_beta: Tensor,
    pub conv: Vec<ConvLayer>,
    pub post_gn_gamma: Tensor,
    pub post_gn_beta: Tensor,
    pub gru: GruParams,
    pub proj_weight: Tensor,
    pub proj_bias: Tensor,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-bound..=bound)).collect())
        .expect("shape matches length")
}

/// Weights ~ U(±1/√fan_in), biases zero, GroupNorm γ = 1 and β = 0.
pub fn init_params(config: &EncoderConfig, seed: u64) -> Result<EncoderParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut conv = Vec::with_capacity(config.n_conv_layers);
    let mut c_in = CHANNELS;
    for (&c, &k) in config.conv_channels.iter().zip(&config.conv_kernels) {
        conv.push(ConvLayer {
            weight: uniform(&mut rng, &[c, c_in, k], c_in * k),
            bias: Tensor::zeros(&[c]),
        });
        c_in = c;
    }
    let h = config.gru_hidden;
    let gru = GruParams {
        w_ih: uniform(&mut rng, &[3 * h, c_in], c_in),
        w_hh: uniform(&mut rng, &[3 * h, h], h),
        b_ih: Tensor::zeros(&[3 * h]),
        b_hh: Tensor::zeros(&[3 * h]),
    };
    Ok(EncoderParams {
        input_gn_gamma: Tensor::filled(&[CHANNELS], 1.0),
        input_gn_beta: Tensor::zeros(&[CHANNELS]),
        conv,
        post_gn_gamma: Tensor::filled(&[c_in], 1.0),
        post_gn_beta: Tensor::zeros(&[c_in]),
        gru,
        proj_weight: uniform(&mut rng, &[config.embed_dim, h], h),
        proj_bias: Tensor::zeros(&[config.embed_dim]),
    })
}

impl EncoderParams {
    /// All parameter tensors in a fixed canonical order.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.input_gn_gamma, &self.input_gn_beta];
        for layer in &self.conv {
            out.push(&layer.weight);
            out.push(&layer.bias);
        }
        out.extend([
            &self.post_gn_gamma,
            &self.post_gn_beta,
            &self.gru.w_ih,
            &self.gru.w_hh,
            &self.gru.b_ih,
            &self.gru.b_hh,
            &self.proj_weight,
            &self.proj_bias,
        ]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.input_gn_gamma, &mut self.input_gn_beta];
        for layer in &mut self.conv {
            out.push(&mut layer.weight);
            out.push(&mut layer.bias);
        }
        out.extend([
            &mut self.post_gn_gamma,
            &mut self.post_gn_beta,
            &mut self.gru.w_ih,
            &mut self.gru.w_hh,
            &mut self.gru.b_ih,
            &mut self.gru.b_hh,
            &mut self.proj_weight,
            &mut self.proj_bias,
        ]);
        out
    }

    /// Names matching the order of [`EncoderParams::tensors`].
    pub fn names(&self) -> Vec<String> {
        let mut out = vec!["input_gn.gamma".to_string(), "input_gn.beta".to_string()];
        for i in 0..self.conv.len() {
            out.push(format!("conv{i}.weight"));
            out.push(format!("conv{i}.bias"));
        }
        for n in [
            "post_gn.gamma",
            "post_gn.beta",
            "gru.w_ih",
            "gru.w_hh",
            "gru.b_ih",
            "gru.b_hh",
            "proj.weight",
            "proj.bias",
        ] {
            out.push(n.to_string());
        }
        out
    }

    /// Rebuilds parameters from tensors in canonical order.
    pub fn from_tensors(config: &EncoderConfig, tensors: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        let template = init_params(config, 0)?;
        let expected: Vec<Vec<usize>> = template.tensors().iter().map(|t| t.shape().to_vec()).collect();
        if tensors.len() != expected.len() {
            return Err(Error::Format(format!(
                "expected {} parameter tensors, got {}",
                expected.len(),
                tensors.len()
            )));
        }
        for (t, shape) in tensors.iter().zip(&expected) {
            if t.shape() != shape.as_slice() {
                return Err(Error::ShapeMismatch {
                    op: "encoder params",
                    expected: shape.clone(),
                    found: t.shape().to_vec(),
                });
            }
        }
        let mut it = tensors.into_iter();
        let mut next = || it.next().expect("count checked");
        let input_gn_gamma = next();
        let input_gn_beta = next();
        let conv = (0..config.n_conv_layers)
            .map(|_| ConvLayer {
                weight: next(),
                bias: next(),
            })
            .collect();
        Ok(EncoderParams {
            input_gn_gamma,
            input_gn_beta,
            conv,
            post_gn_gamma: next(),
            post_gn_beta: next(),
            gru: GruParams {
                w_ih: next(),
                w_hh: next(),
                b_ih: next(),
                b_hh: next(),
            },
            proj_weight: next(),
            proj_bias: next(),
        })
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.numel()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }

    /// SHA-256 over the exact bit patterns of every weight.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for t in self.tensors() {
            for v in t.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Records every tensor on `tape`, as trainable leaves or as constants.
    pub fn register(&self, tape: &mut Tape, trainable: bool) -> EncoderVars {
        let mut put = |t: &Tensor| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        EncoderVars {
            input_gn: (put(&self.input_gn_gamma), put(&self.input_gn_beta)),
            conv: self.conv.iter().map(|l| (put(&l.weight), put(&l.bias))).collect(),
            post_gn: (put(&self.post_gn_gamma), put(&self.post_gn_beta)),
            gru: GruWeights {
                w_ih: put(&self.gru.w_ih),
                w_hh: put(&self.gru.w_hh),
                b_ih: put(&self.gru.b_ih),
                b_hh: put(&self.gru.b_hh),
            },
            proj: (put(&self.proj_weight), put(&self.proj_bias)),
        }
    }
}

/// Encoder parameters recorded on a tape.
#[derive(Clone, Debug)]
pub struct EncoderVars {
    pub input_gn: (Var, Var),
    pub conv: Vec<(Var, Var)>,
    pub post_gn: (Var, Var),
    pub gru: GruWeights,
    pub proj: (Var, Var),
}

impl EncoderVars {
    /// Variables in the canonical parameter order.
    pub fn all(&self) -> Vec<Var> {
        let mut out = vec![self.input_gn.0, self.input_gn.1];
        for &(w, b) in &self.conv {
            out.push(w);
            out.push(b);
        }
        out.extend([
            self.post_gn.0,
            self.post_gn.1,
            self.gru.w_ih,
            self.gru.w_hh,
            self.gru.b_ih,
            self.gru.b_hh,
            self.proj.0,
            self.proj.1,
        ]);
        out
    }

    /// Gradients for every parameter in canonical order (zeros where none reached).
    pub fn grads(&self, tape: &Tape) -> Vec<Vec<f64>> {
        self.all()
            .into_iter()
            .map(|v| {
                tape.grad(v)
                    .map_or_else(|| vec![0.0; tape.value(v).numel()], <[f64]>::to_vec)
            })
            .collect()
    }
}

/// Runs the encoder on `signal` (`6 × T`) and returns the unit-norm embedding.
pub fn encode_on_tape(tape: &mut Tape, vars: &EncoderVars, config: &EncoderConfig, signal: Var) -> Result<Var> {
    let shape = tape.value(signal).shape().to_vec();
    if shape.len() != 2 || shape[0] != CHANNELS {
        return Err(Error::ShapeMismatch {
            op: "encode",
            expected: vec![CHANNELS, shape.last().copied().unwrap_or(0)],
            found: shape,
        });
    }
    config.output_steps(shape[1])?;

    let eps = config.groupnorm_eps;
    let mut x = tape.group_norm(signal, INPUT_GROUPS, vars.input_gn.0, vars.input_gn.1, eps)?;
    for (&(w, b), &stride) in vars.conv.iter().zip(&config.conv_strides) {
        x = tape.conv1d(x, w, b, stride)?;
        x = tape.relu(x)?;
    }
    x = tape.max_pool1d(x, config.pool_kernel, config.pool_kernel)?;
    x = tape.group_norm(x, POST_CONV_GROUPS, vars.post_gn.0, vars.post_gn.1, eps)?;
    let seq = tape.transpose(x)?;
    let h0 = tape.constant(Tensor::zeros(&[config.gru_hidden]));
    let (_, last) = tape.gru(seq, &vars.gru, h0)?;
    let z = tape.linear(last, vars.proj.0, vars.proj.1)?;
    tape.l2_normalize(z, NORMALIZE_EPS)
}

pub fn encode(window: &ImuWindow, params: &EncoderParams, config: &EncoderConfig) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let vars = params.register(&mut tape, false);
    let signal = tape.constant(window.signal.clone());
    let out = encode_on_tape(&mut tape, &vars, config, signal)?;
    Ok(tape.value(out).data().to_vec())
}

/// Encodes equal-length windows independently; row `i` equals `encode(windows[i])`.
pub fn encode_batch(windows: &[ImuWindow], params: &EncoderParams, config: &EncoderConfig) -> Result<Vec<Vec<f64>>> {
    if let Some(first) = windows.first() {
        if let Some(w) = windows.iter().find(|w| w.samples() != first.samples()) {
            return Err(Error::DimensionMismatch {
                expected: first.samples(),
                found: w.samples(),
                context: format!("samples in window {}", w.window_id),
            });
        }
    }
    windows.par_iter().map(|w| encode(w, params, config)).collect()
}
