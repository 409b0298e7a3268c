//! Seeded adversarial training of the toy generator/discriminator pair.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{GeneratorArch, GeneratorModel, LatentCode};
use crate::archive::TensorArchive;
use crate::error::{ensure, Error, Result};
use crate::nn::{init_normal, Adam, ConvGrads, ConvStack, ConvTape};
use crate::tensor::{dense, dense_backward, sigmoid, softplus, Tensor3};

/// Conv stack with a linear head; its scalar output is the D-value.
#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator {
    stack: ConvStack,
    head_weight: Vec<f32>,
    head_bias: Vec<f32>,
}

pub(crate) struct DiscTape {
    conv: ConvTape,
    logit: f32,
}

impl Discriminator {
    pub fn new(image_shape: [usize; 3], channels: &[usize], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layout: Vec<(usize, bool)> = channels.iter().map(|c| (*c, true)).collect();
        let stack = ConvStack::new(&mut rng, image_shape, &layout);
        let n: usize = stack.output_shape().iter().product();
        Self {
            head_weight: init_normal(&mut rng, n, (1.0 / n as f32).sqrt()),
            head_bias: vec![0.0],
            stack,
        }
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.stack.input_shape
    }

    /// Raw discriminator output (logit) for one image.
    pub fn d_value(&self, image: &Tensor3) -> Result<f32> {
        ensure!(
            image.shape() == self.stack.input_shape,
            InvalidInput,
            "image shape {:?} does not match discriminator input {:?}",
            image.shape(),
            self.stack.input_shape
        );
        let feat = self.stack.forward(image);
        Ok(dense(feat.data(), &self.head_weight, &self.head_bias)[0])
    }

    pub(crate) fn forward_tape(&self, image: &Tensor3) -> DiscTape {
        let conv = self.stack.forward_tape(image);
        let logit = dense(conv.output.data(), &self.head_weight, &self.head_bias)[0];
        DiscTape { conv, logit }
    }

    /// Accumulates parameter gradients (when `grads` is given) and returns
    /// the gradient w.r.t. the input image when `input_grad`.
    pub(crate) fn backward(
        &self,
        tape: &DiscTape,
        grad_logit: f32,
        grads: Option<&mut DiscGrads>,
        input_grad: bool,
    ) -> Tensor3 {
        let feat = &tape.conv.output;
        let (head, conv) = match grads {
            Some(g) => (Some((g.head_weight.as_mut_slice(), g.head_bias.as_mut_slice())), Some(&mut g.conv)),
            None => (None, None),
        };
        let g_feat = dense_backward(feat.data(), &self.head_weight, &[grad_logit], head, true)
            .expect("feature grad");
        let [c, h, w] = feat.shape();
        let g_feat = Tensor3::from_vec(c, h, w, g_feat).expect("sized");
        self.stack.backward(&tape.conv, &g_feat, conv, None, input_grad)
    }

    fn params_mut(&mut self) -> Vec<&mut [f32]> {
        let mut p = self.stack.params_mut();
        p.push(&mut self.head_weight);
        p.push(&mut self.head_bias);
        p
    }

    pub fn to_archive(&self) -> Result<TensorArchive> {
        let channels: Vec<usize> = self.stack.blocks.iter().map(|b| b.out_channels).collect();
        let mut a = TensorArchive::new(serde_json::json!({
            "kind": "discriminator",
            "input_shape": self.stack.input_shape,
            "channels": channels,
        }));
        for (i, b) in self.stack.blocks.iter().enumerate() {
            a.push(format!("block{i}.weight"), &[b.weight.len()], b.weight.clone())?;
            a.push(format!("block{i}.bias"), &[b.bias.len()], b.bias.clone())?;
        }
        a.push("head.weight", &[self.head_weight.len()], self.head_weight.clone())?;
        a.push("head.bias", &[1], self.head_bias.clone())?;
        Ok(a)
    }

    pub fn from_archive(a: &TensorArchive) -> Result<Self> {
        if a.meta.get("kind").and_then(|k| k.as_str()) != Some("discriminator") {
            return Err(Error::Archive("not a discriminator checkpoint".into()));
        }
        let shape: [usize; 3] = serde_json::from_value(a.meta["input_shape"].clone())?;
        let channels: Vec<usize> = serde_json::from_value(a.meta["channels"].clone())?;
        let mut d = Discriminator::new(shape, &channels, 0);
        for (i, b) in d.stack.blocks.iter_mut().enumerate() {
            b.weight = a.require(&format!("block{i}.weight"), &[b.weight.len()])?.to_vec();
            b.bias = a.require(&format!("block{i}.bias"), &[b.bias.len()])?.to_vec();
        }
        d.head_weight = a.require("head.weight", &[d.head_weight.len()])?.to_vec();
        d.head_bias = a.require("head.bias", &[1])?.to_vec();
        Ok(d)
    }
}

pub(crate) struct DiscGrads {
    conv: ConvGrads,
    head_weight: Vec<f32>,
    head_bias: Vec<f32>,
}

impl DiscGrads {
    fn zeros_like(d: &Discriminator) -> Self {
        Self {
            conv: ConvGrads::zeros_like(&d.stack),
            head_weight: vec![0.0; d.head_weight.len()],
            head_bias: vec![0.0],
        }
    }

    fn flatten(self) -> Vec<Vec<f32>> {
        let mut v = self.conv.flatten();
        v.push(self.head_weight);
        v.push(self.head_bias);
        v
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub arch: GeneratorArch,
    pub disc_channels: Vec<usize>,
    pub steps: usize,
    pub batch_size: usize,
    pub lr_generator: f32,
    pub lr_discriminator: f32,
    pub beta1: f32,
    pub beta2: f32,
    /// Std of Gaussian noise added to every discriminator input, annealed
    /// linearly to zero over the run.
    pub instance_noise: f32,
    /// Target for real images in the discriminator loss (one-sided smoothing).
    pub real_label: f32,
    /// Training is reported as failed when the mean generator loss over the
    /// final tenth of the run exceeds this value.
    pub max_final_generator_loss: f32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            arch: GeneratorArch::default(),
            disc_channels: vec![16, 32, 32],
            steps: 600,
            batch_size: 16,
            lr_generator: 5e-4,
            lr_discriminator: 5e-4,
            beta1: 0.5,
            beta2: 0.999,
            instance_noise: 0.1,
            real_label: 0.9,
            max_final_generator_loss: 8.0,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        ensure!(self.steps >= 1 && self.batch_size >= 1, Config, "steps and batch size must be >= 1");
        ensure!(
            self.lr_generator > 0.0 && self.lr_discriminator > 0.0,
            Config,
            "learning rates must be positive"
        );
        ensure!(
            (0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2),
            Config,
            "Adam betas must lie in [0, 1)"
        );
        ensure!(
            self.instance_noise >= 0.0 && (0.5..=1.0).contains(&self.real_label),
            Config,
            "instance noise must be >= 0 and the real label in [0.5, 1]"
        );
        ensure!(!self.disc_channels.is_empty(), Config, "discriminator needs at least one block");
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: usize,
    pub discriminator_loss: Vec<f32>,
    pub generator_loss: Vec<f32>,
}

fn sample_latent(rng: &mut ChaCha8Rng, dim: usize) -> LatentCode {
    LatentCode::new((0..dim).map(|_| StandardNormal.sample(rng)).collect()).expect("finite")
}

/// Non-saturating GAN training with Adam, fully determined by `seed`.
pub fn train_toy_pair(
    dataset: &[Tensor3],
    config: &TrainConfig,
    seed: u64,
) -> Result<(GeneratorModel, Discriminator, TrainReport)> {
    config.validate()?;
    ensure!(!dataset.is_empty(), InvalidInput, "empty training set");
    let size = config.arch.image_size();
    let shape = [config.arch.out_channels, size, size];
    ensure!(
        dataset.iter().all(|x| x.shape() == shape),
        InvalidInput,
        "training images must all be {shape:?}"
    );

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gen = GeneratorModel::new(config.arch.clone(), rng.random())?;
    let mut disc = Discriminator::new(shape, &config.disc_channels, rng.random());
    let mut opt_g = Adam::new(config.lr_generator, config.beta1, config.beta2);
    let mut opt_d = Adam::new(config.lr_discriminator, config.beta1, config.beta2);
    let dim = config.arch.latent_dim;
    let b = config.batch_size;
    let mut d_trace = Vec::with_capacity(config.steps);
    let mut g_trace = Vec::with_capacity(config.steps);

    let noisy = |rng: &mut ChaCha8Rng, img: &Tensor3, std: f32| -> Tensor3 {
        let mut out = img.clone();
        if std > 0.0 {
            for v in out.data_mut() {
                let n: f32 = StandardNormal.sample(rng);
                *v += std * n;
            }
        }
        out
    };
    let y_real = config.real_label;
    for step in 0..config.steps {
        let sigma = config.instance_noise * (1.0 - step as f32 / config.steps as f32);
        let mut dg = DiscGrads::zeros_like(&disc);
        let mut d_loss = 0.0f32;
        for _ in 0..b {
            let pick = rng.random_range(0..dataset.len());
            let real = noisy(&mut rng, &dataset[pick], sigma);
            let tape = disc.forward_tape(&real);
            d_loss += y_real * softplus(-tape.logit) + (1.0 - y_real) * softplus(tape.logit);
            disc.backward(&tape, sigmoid(tape.logit) - y_real, Some(&mut dg), false);

            let fake = gen.image(&sample_latent(&mut rng, dim))?;
            let fake = noisy(&mut rng, &fake, sigma);
            let tape = disc.forward_tape(&fake);
            d_loss += softplus(tape.logit);
            disc.backward(&tape, sigmoid(tape.logit), Some(&mut dg), false);
        }
        opt_d.update(disc.params_mut(), &dg.flatten(), 1.0 / (2 * b) as f32);

        let mut gg: Option<Vec<Vec<f32>>> = None;
        let mut g_loss = 0.0f32;
        for _ in 0..b {
            let gtape = gen.forward_tape(&sample_latent(&mut rng, dim));
            let dtape = disc.forward_tape(&noisy(&mut rng, &gtape.image, sigma));
            g_loss += softplus(-dtape.logit);
            let g_img = disc.backward(&dtape, sigmoid(dtape.logit) - 1.0, None, true);
            let grads = gen.backward(&gtape, &g_img);
            match gg.as_mut() {
                None => gg = Some(grads),
                Some(acc) => {
                    for (a, g) in acc.iter_mut().zip(grads) {
                        a.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                    }
                }
            }
        }
        let params: Vec<&mut [f32]> = gen
            .params_mut()
            .iter_mut()
            .flat_map(|p| [p.weight.as_mut_slice(), p.bias.as_mut_slice()])
            .collect();
        opt_g.update(params, &gg.expect("batch >= 1"), 1.0 / b as f32);

        let (dl, gl) = (d_loss / (2 * b) as f32, g_loss / b as f32);
        d_trace.push(dl);
        g_trace.push(gl);
        if !dl.is_finite() || !gl.is_finite() {
            let mut trace = d_trace.clone();
            trace.extend(&g_trace);
            return Err(Error::TrainingFailed {
                reason: "non-finite loss".into(),
                loss_trace: trace,
            });
        }
    }

    let tail = (config.steps / 10).max(1);
    let tail_g = g_trace[g_trace.len() - tail..].iter().sum::<f32>() / tail as f32;
    if tail_g > config.max_final_generator_loss {
        return Err(Error::TrainingFailed {
            reason: format!(
                "generator loss {tail_g:.3} over the final {tail} steps exceeds {}",
                config.max_final_generator_loss
            ),
            loss_trace: g_trace,
        });
    }
    Ok((
        gen,
        disc,
        TrainReport {
            steps: config.steps,
            discriminator_loss: d_trace,
            generator_loss: g_trace,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::shapes_dataset;

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            arch: GeneratorArch {
                latent_dim: 8,
                base_channels: 8,
                base_size: 4,
                hidden_channels: vec![8, 8, 4],
                out_channels: 3,
            },
            disc_channels: vec![4, 8, 8],
            steps: 3,
            batch_size: 2,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn seeded_training_is_reproducible() {
        let data = shapes_dataset(8, 1);
        let (g1, d1, r1) = train_toy_pair(&data, &tiny_config(), 42).unwrap();
        let (g2, d2, r2) = train_toy_pair(&data, &tiny_config(), 42).unwrap();
        assert_eq!(g1, g2);
        assert_eq!(d1, d2);
        assert_eq!(r1, r2);
        let (g3, _, _) = train_toy_pair(&data, &tiny_config(), 43).unwrap();
        assert_ne!(g1.checksum(), g3.checksum());
    }

    #[test]
    fn rejects_bad_configs_and_data() {
        let data = shapes_dataset(2, 1);
        let mut cfg = tiny_config();
        cfg.steps = 0;
        assert!(matches!(train_toy_pair(&data, &cfg, 0), Err(Error::Config(_))));
        assert!(train_toy_pair(&[], &tiny_config(), 0).is_err());
        let wrong = vec![Tensor3::zeros(3, 8, 8)];
        assert!(train_toy_pair(&wrong, &tiny_config(), 0).is_err());
    }

    #[test]
    fn failing_run_reports_loss_trace() {
        let data = shapes_dataset(4, 1);
        let mut cfg = tiny_config();
        cfg.max_final_generator_loss = 0.0;
        match train_toy_pair(&data, &cfg, 0) {
            Err(Error::TrainingFailed { loss_trace, .. }) => assert_eq!(loss_trace.len(), 3),
            other => panic!("expected failure, got {other:?}"),
        }
    }

    #[test]
    fn discriminator_checkpoint_roundtrip() {
        let d = Discriminator::new([3, 8, 8], &[4, 4], 3);
        let back = Discriminator::from_archive(&d.to_archive().unwrap()).unwrap();
        assert_eq!(back, d);
        let img = Tensor3::zeros(3, 8, 8);
        assert!(d.d_value(&img).unwrap().is_finite());
        assert!(d.d_value(&Tensor3::zeros(3, 4, 4)).is_err());
    }
}
