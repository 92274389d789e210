//! The fused classifier: a convolutional encoder over the two-channel SCN
//! tensor, an MLP over the auxiliary vector, and a two-layer fusion head
//! whose final linear layer produces the class logits.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::checkpoint::{self, Manifest};
use crate::nn::{
    softmax, softmax_cross_entropy, Ctx, GradCheckable, Layer, LayerSpec, NamedArray, Param,
    Sequential, Tensor,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub n_rois: usize,
    pub n_aux: usize,
    pub conv_widths: [usize; 3],
    pub kernel: usize,
    pub scn_fc: [usize; 2],
    pub aux_fc: [usize; 2],
    pub fusion_hidden: usize,
    pub dropout_scn: f64,
    pub dropout_aux: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_rois: 116,
            n_aux: 119,
            conv_widths: [64, 128, 256],
            kernel: 3,
            scn_fc: [128, 64],
            aux_fc: [64, 32],
            fusion_hidden: 64,
            dropout_scn: 0.2,
            dropout_aux: 0.3,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kernel.is_multiple_of(2) {
            return Err(Error::Config(
                "conv kernel must be odd to keep the spatial size".into(),
            ));
        }
        if self.n_rois < 4 {
            return Err(Error::Config(
                "the encoder needs at least 4 ROIs (two 2x2 poolings)".into(),
            ));
        }
        let sizes = [self.n_rois, self.n_aux, self.kernel, self.fusion_hidden];
        let widths = self
            .conv_widths
            .iter()
            .chain(&self.scn_fc)
            .chain(&self.aux_fc);
        if sizes.iter().chain(widths).any(|&v| v == 0) {
            return Err(Error::Config("model widths must be positive".into()));
        }
        for rate in [self.dropout_scn, self.dropout_aux] {
            if !(0.0..1.0).contains(&rate) {
                return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
            }
        }
        Ok(())
    }

    /// Side of the last convolutional feature map.
    pub fn cam_size(&self) -> usize {
        self.n_rois / 2 / 2
    }

    fn trunk_specs(&self) -> Vec<LayerSpec> {
        let [c1, c2, c3] = self.conv_widths;
        let conv = |i, o| LayerSpec::Conv2d {
            in_channels: i,
            out_channels: o,
            kernel: self.kernel,
            stride: 1,
            padding: self.kernel / 2,
        };
        let pool = LayerSpec::Maxpool2d {
            kernel: 2,
            stride: 2,
        };
        vec![
            conv(2, c1),
            LayerSpec::Batchnorm2d { channels: c1 },
            LayerSpec::Relu,
            pool.clone(),
            conv(c1, c2),
            LayerSpec::Batchnorm2d { channels: c2 },
            LayerSpec::Relu,
            pool,
            conv(c2, c3),
            LayerSpec::Batchnorm2d { channels: c3 },
            LayerSpec::Relu,
        ]
    }

    fn mlp(input: usize, widths: [usize; 2], dropout: f64) -> Vec<LayerSpec> {
        vec![
            LayerSpec::Linear {
                in_features: input,
                out_features: widths[0],
            },
            LayerSpec::Relu,
            LayerSpec::Dropout { rate: dropout },
            LayerSpec::Linear {
                in_features: widths[0],
                out_features: widths[1],
            },
            LayerSpec::Relu,
        ]
    }

    fn scn_head_specs(&self) -> Vec<LayerSpec> {
        let mut specs = vec![LayerSpec::AdaptiveAvgpool2d { output: 1 }];
        specs.extend(Self::mlp(
            self.conv_widths[2],
            self.scn_fc,
            self.dropout_scn,
        ));
        specs
    }

    fn aux_specs(&self) -> Vec<LayerSpec> {
        Self::mlp(self.n_aux, self.aux_fc, self.dropout_aux)
    }

    fn fusion_specs(&self) -> Vec<LayerSpec> {
        vec![
            LayerSpec::Linear {
                in_features: self.scn_fc[1] + self.aux_fc[1],
                out_features: self.fusion_hidden,
            },
            LayerSpec::Relu,
            LayerSpec::Linear {
                in_features: self.fusion_hidden,
                out_features: 2,
            },
        ]
    }
}

/// Whether the auxiliary branch feeds the fusion head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuxMode {
    Enabled,
    /// The branch output is replaced by zeros of the same width.
    Disabled,
}

#[derive(Debug, Clone)]
pub struct FusionNet {
    pub config: ModelConfig,
    pub trunk: Sequential,
    pub scn_head: Sequential,
    pub aux: Sequential,
    pub fusion: Sequential,
    last_aux_mode: AuxMode,
}

/// Activations and gradients of the last convolutional block for one input.
#[derive(Debug, Clone)]
pub struct CamInputs {
    pub channels: usize,
    pub size: usize,
    /// `[channels, size, size]`
    pub activations: Vec<f64>,
    pub gradients: Vec<f64>,
}

impl FusionNet {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut net = FusionNet {
            trunk: Sequential::new("trunk", config.trunk_specs())?,
            scn_head: Sequential::new("scn_head", config.scn_head_specs())?,
            aux: Sequential::new("aux", config.aux_specs())?,
            fusion: Sequential::new("fusion", config.fusion_specs())?,
            config,
            last_aux_mode: AuxMode::Enabled,
        };
        if let Some(Layer::Conv2d(first)) = net.trunk.layers.first_mut() {
            first.input_grad = false;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for part in net.parts_mut() {
            part.init(&mut rng);
        }
        Ok(net)
    }

    fn parts_mut(&mut self) -> [&mut Sequential; 4] {
        [
            &mut self.trunk,
            &mut self.scn_head,
            &mut self.aux,
            &mut self.fusion,
        ]
    }

    fn parts(&self) -> [&Sequential; 4] {
        [&self.trunk, &self.scn_head, &self.aux, &self.fusion]
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub fn params(&self) -> Vec<&Param> {
        self.parts().into_iter().flat_map(|s| s.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let [a, b, c, d] = self.parts_mut();
        let mut v = a.params_mut();
        v.extend(b.params_mut());
        v.extend(c.params_mut());
        v.extend(d.params_mut());
        v
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    pub fn set_dropout_frozen(&mut self, frozen: bool) {
        for part in self.parts_mut() {
            part.set_dropout_frozen(frozen);
        }
    }

    fn check_inputs(&self, scn: &Tensor, aux: Option<&Tensor>) -> Result<()> {
        let n = self.config.n_rois;
        if scn.shape.len() != 4 || scn.shape[1..] != [2, n, n] {
            return Err(Error::Shape(format!(
                "SCN input {:?}, expected [B, 2, {n}, {n}]",
                scn.shape
            )));
        }
        if let Some(aux) = aux {
            if aux.shape != [scn.shape[0], self.config.n_aux] {
                return Err(Error::Shape(format!(
                    "auxiliary input {:?}, expected [{}, {}]",
                    aux.shape, scn.shape[0], self.config.n_aux
                )));
            }
        }
        Ok(())
    }

    /// Logits `[B, 2]`. In [`AuxMode::Disabled`] `aux` is ignored.
    pub fn forward_logits(
        &mut self,
        scn: &Tensor,
        aux: &Tensor,
        mode: AuxMode,
        ctx: &mut Ctx<'_>,
    ) -> Result<Tensor> {
        self.check_inputs(scn, (mode == AuxMode::Enabled).then_some(aux))?;
        let a = self.trunk.forward(scn, ctx)?;
        let z_scn = self.scn_head.forward(&a, ctx)?;
        let z_aux = match mode {
            AuxMode::Enabled => self.aux.forward(aux, ctx)?,
            AuxMode::Disabled => Tensor::zeros(vec![scn.batch(), self.config.aux_fc[1]]),
        };
        self.last_aux_mode = mode;
        let logits = self
            .fusion
            .forward(&Tensor::concat_features(&z_scn, &z_aux), ctx)?;
        if !logits.all_finite() {
            return Err(Error::Numeric("non-finite logits".into()));
        }
        Ok(logits)
    }

    /// Back-propagates `d loss / d logits` from the most recent forward pass
    /// into the parameter gradients.
    pub fn backward(&mut self, dlogits: &Tensor) {
        let dz = self.fusion.backward(dlogits);
        let (dz_scn, dz_aux) = Tensor::split_features(&dz, self.config.scn_fc[1]);
        let da = self.scn_head.backward(&dz_scn);
        self.trunk.backward(&da);
        if self.last_aux_mode == AuxMode::Enabled {
            self.aux.backward(&dz_aux);
        }
    }

    /// Class probabilities `[B, 2]` in eval mode.
    pub fn forward(&mut self, scn: &Tensor, aux: &Tensor) -> Result<Tensor> {
        let logits = self.forward_logits(scn, aux, AuxMode::Enabled, &mut Ctx::eval())?;
        Ok(softmax(&logits))
    }

    /// Probabilities with the auxiliary contribution zeroed.
    pub fn forward_no_aux(&mut self, scn: &Tensor) -> Result<Tensor> {
        let aux = Tensor::zeros(vec![scn.batch(), self.config.n_aux]);
        let logits = self.forward_logits(scn, &aux, AuxMode::Disabled, &mut Ctx::eval())?;
        Ok(softmax(&logits))
    }

    /// Eval-mode forward of a single subject, then the gradient of logit
    /// `target` with respect to the post-activation output of the last
    /// convolutional block. Parameter gradients are left zeroed.
    pub fn cam_inputs(
        &mut self,
        scn: &Tensor,
        aux: &Tensor,
        mode: AuxMode,
        target: usize,
    ) -> Result<CamInputs> {
        if scn.batch() != 1 {
            return Err(Error::Shape("Grad-CAM takes one subject at a time".into()));
        }
        if target > 1 {
            return Err(Error::InvalidInput(format!(
                "target class {target} out of range"
            )));
        }
        self.check_inputs(scn, (mode == AuxMode::Enabled).then_some(aux))?;
        let mut ctx = Ctx::eval();
        let a = self.trunk.forward(scn, &mut ctx)?;
        let z_scn = self.scn_head.forward(&a, &mut ctx)?;
        let z_aux = match mode {
            AuxMode::Enabled => self.aux.forward(aux, &mut ctx)?,
            AuxMode::Disabled => Tensor::zeros(vec![1, self.config.aux_fc[1]]),
        };
        self.fusion
            .forward(&Tensor::concat_features(&z_scn, &z_aux), &mut ctx)?;
        let mut onehot = Tensor::zeros(vec![1, 2]);
        onehot.data[target] = 1.0;
        let dz = self.fusion.backward(&onehot);
        let (dz_scn, _) = Tensor::split_features(&dz, self.config.scn_fc[1]);
        let da = self.scn_head.backward(&dz_scn);
        self.zero_grad();
        Ok(CamInputs {
            channels: a.shape[1],
            size: a.shape[2],
            activations: a.data,
            gradients: da.data,
        })
    }

    fn named_arrays(&self) -> Vec<NamedArray<'_>> {
        self.parts()
            .into_iter()
            .flat_map(|s| s.named_arrays())
            .collect()
    }

    fn layout(&self) -> Vec<(String, Vec<usize>)> {
        self.named_arrays()
            .into_iter()
            .map(|a| (a.name, a.shape))
            .collect()
    }

    /// Serialises all weights and batch-norm statistics.
    pub fn to_checkpoint(&self, meta: serde_json::Value) -> (Vec<u8>, Manifest) {
        let meta = serde_json::json!({
            "model": self.config,
            "param_count": self.param_count(),
            "layers": {
                "trunk": self.trunk.specs,
                "scn_head": self.scn_head.specs,
                "aux": self.aux.specs,
                "fusion": self.fusion.specs,
            },
            "run": meta,
        });
        checkpoint::encode(&self.named_arrays(), meta)
    }

    pub fn from_checkpoint(blob: &[u8], manifest: &Manifest) -> Result<Self> {
        let config: ModelConfig = serde_json::from_value(manifest.meta["model"].clone())
            .map_err(|e| Error::ArtifactMismatch(format!("checkpoint model config: {e}")))?;
        let mut net = FusionNet::new(config, 0)?;
        let arrays = checkpoint::decode(blob, manifest, &net.layout())?;
        let expected_count = manifest.meta["param_count"].as_u64();
        if expected_count != Some(net.param_count() as u64) {
            return Err(Error::ArtifactMismatch(
                "checkpoint parameter count differs from its config".into(),
            ));
        }
        net.set_state(&arrays)?;
        Ok(net)
    }

    /// Copies of every weight and batch-norm statistic, in checkpoint order.
    pub fn state(&self) -> Vec<Vec<f64>> {
        self.named_arrays()
            .iter()
            .map(|a| a.values.to_vec())
            .collect()
    }

    pub fn set_state(&mut self, state: &[Vec<f64>]) -> Result<()> {
        let [a, b, c, d] = self.parts_mut();
        let targets: Vec<_> = a
            .named_arrays_mut()
            .into_iter()
            .chain(b.named_arrays_mut())
            .chain(c.named_arrays_mut())
            .chain(d.named_arrays_mut())
            .collect();
        if targets.len() != state.len()
            || targets
                .iter()
                .zip(state)
                .any(|((_, dst), src)| dst.len() != src.len())
        {
            return Err(Error::Shape(
                "model state does not match the architecture".into(),
            ));
        }
        for ((_, dst), src) in targets.into_iter().zip(state) {
            dst.copy_from_slice(src);
        }
        Ok(())
    }

    pub fn save(&self, stem: &Path, meta: serde_json::Value) -> Result<()> {
        let (blob, manifest) = self.to_checkpoint(meta);
        checkpoint::save(stem, &blob, &manifest)
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let (blob, manifest) = checkpoint::load(stem)?;
        Self::from_checkpoint(&blob, &manifest).map_err(|e| e.in_file(stem.with_extension("json")))
    }
}

/// Class-weighted training loss of a randomly perturbed network on a fixed
/// random batch, for finite-difference checks. Dropout masks are drawn on
/// construction and frozen.
pub struct LossRig {
    pub net: FusionNet,
    scn: Tensor,
    aux: Tensor,
    targets: Vec<usize>,
    rng: ChaCha8Rng,
}

impl LossRig {
    pub fn new(config: ModelConfig, batch: usize, seed: u64) -> Result<Self> {
        let mut net = FusionNet::new(config.clone(), seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1055);
        for p in net.params_mut() {
            for v in p.value.iter_mut() {
                *v += rng.random_range(-0.2..0.2);
            }
        }
        let n = config.n_rois;
        let scn = Tensor::new(
            vec![batch, 2, n, n],
            (0..batch * 2 * n * n)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect(),
        );
        let aux = Tensor::new(
            vec![batch, config.n_aux],
            (0..batch * config.n_aux)
                .map(|_| rng.random_range(0.0..1.0))
                .collect(),
        );
        let targets = (0..batch).map(|i| (i + 1) % 2).collect();
        let mut rig = LossRig {
            net,
            scn,
            aux,
            targets,
            rng,
        };
        rig.evaluate(false)?;
        rig.net.set_dropout_frozen(true);
        Ok(rig)
    }
}

impl GradCheckable for LossRig {
    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.net.params_mut()
    }

    fn evaluate(&mut self, with_grad: bool) -> Result<f64> {
        let mut ctx = Ctx {
            training: true,
            rng: Some(&mut self.rng),
        };
        let logits = self
            .net
            .forward_logits(&self.scn, &self.aux, AuxMode::Enabled, &mut ctx)?;
        let out = softmax_cross_entropy(&logits, &self.targets, Some(&[0.8, 1.3]))?;
        if with_grad {
            self.net.backward(&out.grad);
        }
        Ok(out.loss)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::grad_check;

    fn tiny() -> ModelConfig {
        ModelConfig {
            n_rois: 8,
            n_aux: 5,
            conv_widths: [3, 4, 4],
            scn_fc: [6, 4],
            aux_fc: [4, 3],
            fusion_hidden: 5,
            ..ModelConfig::default()
        }
    }

    fn inputs(cfg: &ModelConfig, batch: usize, seed: u64) -> (Tensor, Tensor) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = cfg.n_rois;
        let scn = Tensor::new(
            vec![batch, 2, n, n],
            (0..batch * 2 * n * n)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect(),
        );
        let aux = Tensor::new(
            vec![batch, cfg.n_aux],
            (0..batch * cfg.n_aux)
                .map(|_| rng.random_range(0.0..1.0))
                .collect(),
        );
        (scn, aux)
    }

    #[test]
    fn full_loss_gradient_matches_finite_differences() {
        let mut rig = LossRig::new(tiny(), 3, 3).unwrap();
        let report = grad_check(&mut rig, 12, 1e-5, 1).unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn probabilities_sum_to_one_and_are_deterministic() {
        let cfg = tiny();
        let mut net = FusionNet::new(cfg.clone(), 1).unwrap();
        let (scn, aux) = inputs(&cfg, 1, 2);
        let twice_scn = Tensor::new(
            vec![2, 2, 8, 8],
            [scn.data.clone(), scn.data.clone()].concat(),
        );
        let twice_aux = Tensor::new(vec![2, 5], [aux.data.clone(), aux.data.clone()].concat());
        let p = net.forward(&twice_scn, &twice_aux).unwrap();
        assert_eq!(p.shape, vec![2, 2]);
        assert!((p.data[0] + p.data[1] - 1.0).abs() < 1e-12);
        assert_eq!(p.data[..2], p.data[2..]);
        assert_eq!(net.forward(&twice_scn, &twice_aux).unwrap(), p);
    }

    #[test]
    fn no_aux_ignores_auxiliary_values() {
        let cfg = tiny();
        let mut net = FusionNet::new(cfg.clone(), 1).unwrap();
        let (scn, aux) = inputs(&cfg, 2, 2);
        let (_, other) = inputs(&cfg, 2, 3);
        let a = net
            .forward_logits(&scn, &aux, AuxMode::Disabled, &mut Ctx::eval())
            .unwrap();
        let b = net
            .forward_logits(&scn, &other, AuxMode::Disabled, &mut Ctx::eval())
            .unwrap();
        assert_eq!(a, b);
        assert_eq!(net.forward_no_aux(&scn).unwrap().shape, vec![2, 2]);
    }

    #[test]
    fn every_parameter_block_receives_gradient() {
        let cfg = tiny();
        let mut net = FusionNet::new(cfg.clone(), 7).unwrap();
        let (scn, aux) = inputs(&cfg, 4, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut ctx = Ctx {
            training: true,
            rng: Some(&mut rng),
        };
        let logits = net
            .forward_logits(&scn, &aux, AuxMode::Enabled, &mut ctx)
            .unwrap();
        let out = softmax_cross_entropy(&logits, &[0, 1, 0, 1], None).unwrap();
        net.backward(&out.grad);
        for (i, p) in net.params().iter().enumerate() {
            assert!(
                p.grad.iter().any(|&g| g != 0.0),
                "parameter block {i} has no gradient"
            );
        }
    }

    #[test]
    fn both_scn_channels_reach_the_output() {
        let cfg = tiny();
        let mut net = FusionNet::new(cfg.clone(), 2).unwrap();
        let (scn, aux) = inputs(&cfg, 1, 5);
        let base = net.forward(&scn, &aux).unwrap();
        for channel in 0..2 {
            let mut bumped = scn.clone();
            let plane = cfg.n_rois * cfg.n_rois;
            for v in &mut bumped.data[channel * plane..(channel + 1) * plane] {
                *v += 0.5;
            }
            assert_ne!(
                net.forward(&bumped, &aux).unwrap(),
                base,
                "channel {channel}"
            );
        }
    }

    #[test]
    fn rejects_bad_shapes() {
        let cfg = tiny();
        let mut net = FusionNet::new(cfg.clone(), 2).unwrap();
        let (scn, _) = inputs(&cfg, 2, 5);
        let aux = Tensor::zeros(vec![2, 4]);
        assert!(matches!(net.forward(&scn, &aux), Err(Error::Shape(_))));
        let flat = Tensor::zeros(vec![2, 2, 8, 7]);
        assert!(net.forward_no_aux(&flat).is_err());
    }

    #[test]
    fn default_parameter_count() {
        let net = FusionNet::new(ModelConfig::default(), 0).unwrap();
        let conv = (2 * 9 + 1) * 64 + (64 * 9 + 1) * 128 + (128 * 9 + 1) * 256;
        let bn = 2 * (64 + 128 + 256);
        let fc = (256 + 1) * 128
            + (128 + 1) * 64
            + (119 + 1) * 64
            + (64 + 1) * 32
            + (96 + 1) * 64
            + (64 + 1) * 2;
        assert_eq!(net.param_count(), conv + bn + fc);
    }

    #[test]
    fn checkpoint_roundtrip_preserves_outputs() {
        let cfg = tiny();
        let mut net = FusionNet::new(cfg.clone(), 4).unwrap();
        let (scn, aux) = inputs(&cfg, 3, 6);
        // move running statistics away from their initial values
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ctx = Ctx {
            training: true,
            rng: Some(&mut rng),
        };
        net.forward_logits(&scn, &aux, AuxMode::Enabled, &mut ctx)
            .unwrap();
        let (blob, manifest) = net.to_checkpoint(serde_json::json!({"seed": 4}));
        let mut back = FusionNet::from_checkpoint(&blob, &manifest).unwrap();
        assert_eq!(
            back.forward(&scn, &aux).unwrap(),
            net.forward(&scn, &aux).unwrap()
        );

        let mut other = manifest.clone();
        other.meta["model"]["fusion_hidden"] = serde_json::json!(7);
        assert!(FusionNet::from_checkpoint(&blob, &other).is_err());
    }

    #[test]
    fn cam_gradient_matches_finite_difference_of_logit() {
        let cfg = tiny();
        let mut net = FusionNet::new(cfg.clone(), 11).unwrap();
        let (scn, aux) = inputs(&cfg, 1, 12);
        let cam = net.cam_inputs(&scn, &aux, AuxMode::Enabled, 1).unwrap();
        assert_eq!((cam.channels, cam.size), (4, 2));
        // perturb one activation and push it through the head by hand
        let head = |net: &mut FusionNet, a: &[f64]| {
            let t = Tensor::new(vec![1, cam.channels, cam.size, cam.size], a.to_vec());
            let z = net.scn_head.forward(&t, &mut Ctx::eval()).unwrap();
            let za = net.aux.forward(&aux, &mut Ctx::eval()).unwrap();
            net.fusion
                .forward(&Tensor::concat_features(&z, &za), &mut Ctx::eval())
                .unwrap()
                .data[1]
        };
        for idx in [0, 5, 9, 15] {
            let mut plus = cam.activations.clone();
            plus[idx] += 1e-6;
            let mut minus = cam.activations.clone();
            minus[idx] -= 1e-6;
            let fd = (head(&mut net, &plus) - head(&mut net, &minus)) / 2e-6;
            assert!(
                (fd - cam.gradients[idx]).abs() < 1e-7,
                "{idx}: {fd} vs {}",
                cam.gradients[idx]
            );
        }
        assert!(net
            .params()
            .iter()
            .all(|p| p.grad.iter().all(|&g| g == 0.0)));
    }
}
