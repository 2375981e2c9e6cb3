//! Siamese spatial-spectral comparison network.
//!
//! One shared-weight encoder (two 3D residual blocks, the second with
//! spectral stride 2, followed by a channel + spatial-spectral attention
//! block and a 3-layer projector) and a 2-layer predictor head. Both
//! temporal branches run through the same parameter tensors; the training
//! loss is the symmetric negative cosine similarity with a stop-gradient on
//! the projected side.

mod infer;
mod train;

pub use infer::{infer_loss_map, infer_loss_map_tiled};
pub use train::{loss_history_csv, train, TrainConfig};

use std::path::Path;

use crate::autodiff::checkpoint::{load_checkpoint, save_checkpoint};
use crate::autodiff::{batchnorm3d, conv3d, Mode, RunningStats, Tensor};
use crate::error::{Error, Result};
use crate::rng::Rng;

pub use crate::autodiff::Mode as ForwardMode;

/// Which backbone feature the inference loss map is built from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureTap {
    /// End of the backbone, after the attention block (default).
    AfterAttention,
    /// Output of the second residual block, before attention.
    BeforeAttention,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArchConfig {
    /// Channels after the first residual block.
    pub c1: usize,
    /// Channels after the second (spectrally strided) residual block.
    pub c2: usize,
    /// Kernel extents (depth, height, width) for every conv, odd for
    /// same-padding.
    pub kernel: (usize, usize, usize),
    /// Widths of the three projector layers.
    pub proj_dims: [usize; 3],
    /// Predictor bottleneck and output widths; the output width must equal
    /// the projector output width.
    pub pred_dims: [usize; 2],
    /// Channel-attention reduction ratio.
    pub cbam_reduction: usize,
    /// Training patch side m.
    pub patch_size: usize,
    pub feature_tap: FeatureTap,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            c1: 8,
            c2: 16,
            kernel: (3, 3, 3),
            proj_dims: [256, 256, 128],
            pred_dims: [64, 128],
            cbam_reduction: 4,
            patch_size: 31,
            feature_tap: FeatureTap::AfterAttention,
        }
    }
}

impl ArchConfig {
    /// Small configuration used by gradient checks and desk-scale smoke runs.
    pub fn tiny() -> Self {
        ArchConfig {
            c1: 4,
            c2: 8,
            kernel: (3, 3, 3),
            proj_dims: [16, 16, 8],
            pred_dims: [4, 8],
            cbam_reduction: 2,
            patch_size: 7,
            feature_tap: FeatureTap::AfterAttention,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.c1 == 0 || self.c2 == 0 {
            return Err(Error::InvalidConfig {
                message: "c1 and c2 must be >= 1".into(),
            });
        }
        if self.pred_dims[1] != self.proj_dims[2] {
            return Err(Error::InvalidConfig {
                message: format!(
                    "predictor output width {} must equal projector output width {}",
                    self.pred_dims[1], self.proj_dims[2]
                ),
            });
        }
        let (kd, kh, kw) = self.kernel;
        if kd % 2 == 0 || kh % 2 == 0 || kw % 2 == 0 || kd == 0 {
            return Err(Error::InvalidConfig {
                message: format!(
                    "kernel extents must be odd for same-padding, got {:?}",
                    self.kernel
                ),
            });
        }
        if self.patch_size % 2 == 0 || self.patch_size < kh.max(kw) {
            return Err(Error::InvalidConfig {
                message: format!(
                    "patch size must be odd and >= the spatial kernel extent, got {}",
                    self.patch_size
                ),
            });
        }
        if self.cbam_reduction == 0 || self.cbam_reduction > self.c2 {
            return Err(Error::InvalidConfig {
                message: format!(
                    "cbam reduction {} must be in 1..={}",
                    self.cbam_reduction, self.c2
                ),
            });
        }
        if self.proj_dims.contains(&0) || self.pred_dims.contains(&0) {
            return Err(Error::InvalidConfig {
                message: "zero-width FC layer".into(),
            });
        }
        Ok(())
    }

    fn same_pad(&self) -> (usize, usize, usize) {
        (
            (self.kernel.0 - 1) / 2,
            (self.kernel.1 - 1) / 2,
            (self.kernel.2 - 1) / 2,
        )
    }

    /// Spatial halo consumed by the backbone up to the attention output:
    /// four stride-1 convs plus the spatial-attention conv.
    pub fn receptive_radius(&self) -> (usize, usize) {
        let rh = (self.kernel.1 - 1) / 2;
        let rw = (self.kernel.2 - 1) / 2;
        (5 * rh, 5 * rw)
    }
}

const BN_EPS: f64 = 1e-5;
const COSINE_EPS: f64 = 1e-12;

struct ConvLayer {
    weight: Tensor,
    stride: (usize, usize, usize),
    padding: (usize, usize, usize),
}

impl ConvLayer {
    fn new(
        cout: usize,
        cin: usize,
        kernel: (usize, usize, usize),
        stride: (usize, usize, usize),
        padding: (usize, usize, usize),
        rng: &mut Rng,
    ) -> Self {
        let fan_in = cin * kernel.0 * kernel.1 * kernel.2;
        let std = (2.0 / fan_in as f64).sqrt();
        let n = cout * fan_in;
        let values = (0..n).map(|_| rng.normal() * std).collect();
        let weight = Tensor::param(vec![cout, cin, kernel.0, kernel.1, kernel.2], values).unwrap();
        ConvLayer {
            weight,
            stride,
            padding,
        }
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        conv3d(x, &self.weight, self.stride, self.padding)
    }
}

struct NormLayer {
    gamma: Tensor,
    beta: Tensor,
    stats: RunningStats,
}

impl NormLayer {
    fn new(channels: usize) -> Self {
        NormLayer {
            gamma: Tensor::param(vec![channels], vec![1.0; channels]).unwrap(),
            beta: Tensor::param(vec![channels], vec![0.0; channels]).unwrap(),
            stats: RunningStats::new(channels),
        }
    }

    fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        batchnorm3d(x, &self.gamma, &self.beta, &self.stats, mode, BN_EPS)
    }

    /// Batch-normalize a [N, F] matrix by viewing it as [N, F, 1, 1, 1].
    fn forward_rows(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let (n, f) = (x.shape()[0], x.shape()[1]);
        let shaped = x.reshape(vec![n, f, 1, 1, 1])?;
        self.forward(&shaped, mode)?.reshape(vec![n, f])
    }
}

struct LinearLayer {
    weight: Tensor,
    bias: Tensor,
}

impl LinearLayer {
    fn new(fan_in: usize, fan_out: usize, rng: &mut Rng) -> Self {
        let std = (2.0 / fan_in as f64).sqrt();
        let values = (0..fan_in * fan_out).map(|_| rng.normal() * std).collect();
        // Small nonzero biases keep layer outputs generically away from the
        // exact zero vector, where the cosine normalization is stiff.
        let bound = 1.0 / (fan_in as f64).sqrt();
        let biases = (0..fan_out).map(|_| rng.range(-bound, bound)).collect();
        LinearLayer {
            weight: Tensor::param(vec![fan_in, fan_out], values).unwrap(),
            bias: Tensor::param(vec![fan_out], biases).unwrap(),
        }
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.matmul(&self.weight)?.add(&self.bias)
    }
}

pub struct MtcNetModel {
    arch: ArchConfig,
    // First residual block, stride 1 throughout; the shortcut is a 1x1x1
    // conv exactly when the channel count changes.
    r1_conv_a: ConvLayer,
    r1_bn_a: NormLayer,
    r1_conv_b: ConvLayer,
    r1_bn_b: NormLayer,
    r1_shortcut: Option<(ConvLayer, NormLayer)>,
    // Second residual block: spectral stride 2 on the first conv and on the
    // 1x1x1 downsample branch.
    r2_conv_a: ConvLayer,
    r2_bn_a: NormLayer,
    r2_conv_b: ConvLayer,
    r2_bn_b: NormLayer,
    r2_shortcut: (ConvLayer, NormLayer),
    // Attention: shared channel MLP and a spatial-spectral conv over the
    // stacked (mean, max over channels) volume.
    att_fc1: LinearLayer,
    att_fc2: LinearLayer,
    att_spatial: ConvLayer,
    att_spatial_bias: Tensor,
    // Projector: three FC layers, each batch-normalized, ReLU between.
    proj_fc1: LinearLayer,
    proj_bn1: NormLayer,
    proj_fc2: LinearLayer,
    proj_bn2: NormLayer,
    proj_fc3: LinearLayer,
    proj_bn3: NormLayer,
    // Predictor: bottleneck FC + BN + ReLU, then the output FC.
    pred_fc1: LinearLayer,
    pred_bn: NormLayer,
    pred_fc2: LinearLayer,
}

impl MtcNetModel {
    pub fn new(arch: &ArchConfig, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = Rng::new(seed).fork(0x6d74636e);
        let k = arch.kernel;
        let pad = arch.same_pad();
        let hidden = (arch.c2 / arch.cbam_reduction).max(1);
        let model = MtcNetModel {
            arch: arch.clone(),
            r1_conv_a: ConvLayer::new(arch.c1, 1, k, (1, 1, 1), pad, &mut rng),
            r1_bn_a: NormLayer::new(arch.c1),
            r1_conv_b: ConvLayer::new(arch.c1, arch.c1, k, (1, 1, 1), pad, &mut rng),
            r1_bn_b: NormLayer::new(arch.c1),
            r1_shortcut: if arch.c1 == 1 {
                None
            } else {
                Some((
                    ConvLayer::new(arch.c1, 1, (1, 1, 1), (1, 1, 1), (0, 0, 0), &mut rng),
                    NormLayer::new(arch.c1),
                ))
            },
            r2_conv_a: ConvLayer::new(arch.c2, arch.c1, k, (2, 1, 1), pad, &mut rng),
            r2_bn_a: NormLayer::new(arch.c2),
            r2_conv_b: ConvLayer::new(arch.c2, arch.c2, k, (1, 1, 1), pad, &mut rng),
            r2_bn_b: NormLayer::new(arch.c2),
            r2_shortcut: (
                ConvLayer::new(arch.c2, arch.c1, (1, 1, 1), (2, 1, 1), (0, 0, 0), &mut rng),
                NormLayer::new(arch.c2),
            ),
            att_fc1: LinearLayer::new(arch.c2, hidden, &mut rng),
            att_fc2: LinearLayer::new(hidden, arch.c2, &mut rng),
            att_spatial: ConvLayer::new(1, 2, k, (1, 1, 1), pad, &mut rng),
            att_spatial_bias: Tensor::param(vec![1], vec![0.0]).unwrap(),
            proj_fc1: LinearLayer::new(arch.c2, arch.proj_dims[0], &mut rng),
            proj_bn1: NormLayer::new(arch.proj_dims[0]),
            proj_fc2: LinearLayer::new(arch.proj_dims[0], arch.proj_dims[1], &mut rng),
            proj_bn2: NormLayer::new(arch.proj_dims[1]),
            proj_fc3: LinearLayer::new(arch.proj_dims[1], arch.proj_dims[2], &mut rng),
            proj_bn3: NormLayer::new(arch.proj_dims[2]),
            pred_fc1: LinearLayer::new(arch.proj_dims[2], arch.pred_dims[0], &mut rng),
            pred_bn: NormLayer::new(arch.pred_dims[0]),
            pred_fc2: LinearLayer::new(arch.pred_dims[0], arch.pred_dims[1], &mut rng),
        };
        Ok(model)
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    /// Named trainable parameters, in a stable order.
    pub fn params(&self) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> = Vec::new();
        let mut conv = |name: &str, layer: &ConvLayer| {
            out.push((format!("{}.weight", name), layer.weight.clone()));
        };
        conv("r1.conv_a", &self.r1_conv_a);
        conv("r1.conv_b", &self.r1_conv_b);
        if let Some((sc, _)) = &self.r1_shortcut {
            conv("r1.shortcut", sc);
        }
        conv("r2.conv_a", &self.r2_conv_a);
        conv("r2.conv_b", &self.r2_conv_b);
        conv("r2.shortcut", &self.r2_shortcut.0);
        conv("att.spatial", &self.att_spatial);
        drop(conv);
        let mut norm = |name: &str, layer: &NormLayer| {
            out.push((format!("{}.gamma", name), layer.gamma.clone()));
            out.push((format!("{}.beta", name), layer.beta.clone()));
        };
        norm("r1.bn_a", &self.r1_bn_a);
        norm("r1.bn_b", &self.r1_bn_b);
        if let Some((_, bn)) = &self.r1_shortcut {
            norm("r1.shortcut_bn", bn);
        }
        norm("r2.bn_a", &self.r2_bn_a);
        norm("r2.bn_b", &self.r2_bn_b);
        norm("r2.shortcut_bn", &self.r2_shortcut.1);
        norm("proj.bn1", &self.proj_bn1);
        norm("proj.bn2", &self.proj_bn2);
        norm("proj.bn3", &self.proj_bn3);
        norm("pred.bn", &self.pred_bn);
        drop(norm);
        let mut fc = |name: &str, layer: &LinearLayer| {
            out.push((format!("{}.weight", name), layer.weight.clone()));
            out.push((format!("{}.bias", name), layer.bias.clone()));
        };
        fc("att.fc1", &self.att_fc1);
        fc("att.fc2", &self.att_fc2);
        fc("proj.fc1", &self.proj_fc1);
        fc("proj.fc2", &self.proj_fc2);
        fc("proj.fc3", &self.proj_fc3);
        fc("pred.fc1", &self.pred_fc1);
        fc("pred.fc2", &self.pred_fc2);
        drop(fc);
        out.push((
            "att.spatial_bias".to_string(),
            self.att_spatial_bias.clone(),
        ));
        out
    }

    fn norm_layers(&self) -> Vec<(String, &NormLayer)> {
        let mut out: Vec<(String, &NormLayer)> = vec![
            ("r1.bn_a".into(), &self.r1_bn_a),
            ("r1.bn_b".into(), &self.r1_bn_b),
            ("r2.bn_a".into(), &self.r2_bn_a),
            ("r2.bn_b".into(), &self.r2_bn_b),
            ("r2.shortcut_bn".into(), &self.r2_shortcut.1),
            ("proj.bn1".into(), &self.proj_bn1),
            ("proj.bn2".into(), &self.proj_bn2),
            ("proj.bn3".into(), &self.proj_bn3),
            ("pred.bn".into(), &self.pred_bn),
        ];
        if let Some((_, bn)) = &self.r1_shortcut {
            out.push(("r1.shortcut_bn".into(), bn));
        }
        out
    }

    /// First residual block: conv-BN-ReLU-conv-BN plus shortcut, then ReLU.
    /// Spatial and spectral extents are preserved.
    pub fn resnet1_forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let mut y = self.r1_conv_a.forward(x)?;
        y = self.r1_bn_a.forward(&y, mode)?.relu();
        y = self.r1_conv_b.forward(&y)?;
        y = self.r1_bn_b.forward(&y, mode)?;
        let shortcut = match &self.r1_shortcut {
            Some((conv, bn)) => bn.forward(&conv.forward(x)?, mode)?,
            None => x.clone(),
        };
        Ok(y.add(&shortcut)?.relu())
    }

    /// Second residual block with spectral stride 2 on the first conv and on
    /// the 1x1x1 downsample branch; depth goes from C to ceil(C/2).
    pub fn resnet2_forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        if x.shape().len() != 5 || x.shape()[2] < 2 {
            return Err(Error::shape(
                "[N, c1, D>=2, H, W] input".to_string(),
                format!("{:?}", x.shape()),
            ));
        }
        let mut y = self.r2_conv_a.forward(x)?;
        y = self.r2_bn_a.forward(&y, mode)?.relu();
        y = self.r2_conv_b.forward(&y)?;
        y = self.r2_bn_b.forward(&y, mode)?;
        let shortcut = self
            .r2_shortcut
            .1
            .forward(&self.r2_shortcut.0.forward(x)?, mode)?;
        Ok(y.add(&shortcut)?.relu())
    }

    /// Channel-attention gate from pooled descriptors: sigmoid of the shared
    /// MLP applied to both, summed. Inputs and output have shape [N, ch].
    pub fn channel_gate(&self, mean_pool: &Tensor, max_pool: &Tensor) -> Result<Tensor> {
        let mlp = |v: &Tensor| -> Result<Tensor> {
            self.att_fc2.forward(&self.att_fc1.forward(v)?.relu())
        };
        Ok(mlp(mean_pool)?.add(&mlp(max_pool)?)?.sigmoid())
    }

    /// Apply a precomputed channel gate, then spatial-spectral attention.
    pub fn apply_attention(&self, x: &Tensor, gate: &Tensor) -> Result<Tensor> {
        let (n, ch) = (x.shape()[0], x.shape()[1]);
        let gated = x.mul(&gate.reshape(vec![n, ch, 1, 1, 1])?)?;
        let mean_c = gated.mean_over(&[1])?;
        let max_c = gated.max_over(&[1])?;
        let stacked = mean_c.concat(&max_c, 1)?;
        let logits = self
            .att_spatial
            .forward(&stacked)?
            .add(&self.att_spatial_bias)?;
        gated.mul(&logits.sigmoid())
    }

    /// Full attention block: channel attention from global pooled
    /// descriptors, then spatial-spectral attention. Output extents equal
    /// input extents and |output| <= |input| elementwise.
    pub fn cbam_forward(&self, x: &Tensor) -> Result<Tensor> {
        let (n, ch) = (x.shape()[0], x.shape()[1]);
        let mean_pool = x.mean_over(&[2, 3, 4])?.reshape(vec![n, ch])?;
        let max_pool = x.max_over(&[2, 3, 4])?.reshape(vec![n, ch])?;
        let gate = self.channel_gate(&mean_pool, &max_pool)?;
        self.apply_attention(x, &gate)
    }

    /// Backbone features: (after-attention output, tapped feature for the
    /// inference loss map).
    pub fn backbone_forward(&self, x: &Tensor, mode: Mode) -> Result<(Tensor, Tensor)> {
        let h1 = self.resnet1_forward(x, mode)?;
        let h2 = self.resnet2_forward(&h1, mode)?;
        let attended = self.cbam_forward(&h2)?;
        let tapped = match self.arch.feature_tap {
            FeatureTap::AfterAttention => attended.clone(),
            FeatureTap::BeforeAttention => h2,
        };
        Ok((attended, tapped))
    }

    fn projector_forward(&self, pooled: &Tensor, mode: Mode) -> Result<Tensor> {
        let mut z = self
            .proj_bn1
            .forward_rows(&self.proj_fc1.forward(pooled)?, mode)?
            .relu();
        z = self
            .proj_bn2
            .forward_rows(&self.proj_fc2.forward(&z)?, mode)?
            .relu();
        self.proj_bn3
            .forward_rows(&self.proj_fc3.forward(&z)?, mode)
    }

    /// Patch batch [N, 1, C, m, m] to projected features [N, proj_out],
    /// also returning the tapped backbone feature volume.
    pub fn encode(&self, x: &Tensor, mode: Mode) -> Result<(Tensor, Tensor)> {
        let (attended, tapped) = self.backbone_forward(x, mode)?;
        let (n, ch) = (attended.shape()[0], attended.shape()[1]);
        let pooled = attended.mean_over(&[2, 3, 4])?.reshape(vec![n, ch])?;
        let z = self.projector_forward(&pooled, mode)?;
        Ok((z, tapped))
    }

    /// Predictor head h: z to p, [N, proj_out] to [N, pred_out].
    pub fn predict(&self, z: &Tensor, mode: Mode) -> Result<Tensor> {
        let hidden = self
            .pred_bn
            .forward_rows(&self.pred_fc1.forward(z)?, mode)?
            .relu();
        self.pred_fc2.forward(&hidden)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut entries = self.params();
        for (name, layer) in self.norm_layers() {
            entries.push((
                format!("{}.running_mean", name),
                Tensor::from_vec(vec![layer.stats.channels()], layer.stats.mean())?,
            ));
            entries.push((
                format!("{}.running_var", name),
                Tensor::from_vec(vec![layer.stats.channels()], layer.stats.var())?,
            ));
        }
        save_checkpoint(path, &entries)
    }

    pub fn load(arch: &ArchConfig, path: &Path) -> Result<Self> {
        let model = MtcNetModel::new(arch, 0)?;
        let entries = load_checkpoint(path)?;
        let mut by_name: std::collections::HashMap<String, (Vec<usize>, Vec<f64>)> =
            entries.into_iter().map(|(n, s, v)| (n, (s, v))).collect();
        for (name, tensor) in model.params() {
            let (shape, values) = by_name.remove(&name).ok_or_else(|| Error::Format {
                path: path.to_path_buf(),
                line: 0,
                message: format!("checkpoint is missing tensor {:?}", name),
            })?;
            if shape != tensor.shape() {
                return Err(Error::shape(
                    format!("{:?} for {}", tensor.shape(), name),
                    format!("{:?}", shape),
                ));
            }
            tensor.set_values(&values)?;
        }
        for (name, layer) in model.norm_layers() {
            let mean_name = format!("{}.running_mean", name);
            let var_name = format!("{}.running_var", name);
            let (_, mean) = by_name.remove(&mean_name).ok_or_else(|| Error::Format {
                path: path.to_path_buf(),
                line: 0,
                message: format!("checkpoint is missing tensor {:?}", mean_name),
            })?;
            let (_, var) = by_name.remove(&var_name).ok_or_else(|| Error::Format {
                path: path.to_path_buf(),
                line: 0,
                message: format!("checkpoint is missing tensor {:?}", var_name),
            })?;
            if mean.len() != layer.stats.channels() || var.len() != layer.stats.channels() {
                return Err(Error::shape(
                    format!("{} running values", layer.stats.channels()),
                    format!("{}/{}", mean.len(), var.len()),
                ));
            }
            layer.stats.set(mean, var);
        }
        if !by_name.is_empty() {
            let mut extra: Vec<String> = by_name.into_keys().collect();
            extra.sort();
            return Err(Error::Format {
                path: path.to_path_buf(),
                line: 0,
                message: format!("checkpoint has unknown tensors: {:?}", extra),
            });
        }
        Ok(model)
    }
}

/// Row-wise L2 normalization of [N, F]: each row divided by its norm + eps.
fn normalize_rows(m: &Tensor, eps: f64) -> Result<Tensor> {
    let norms = m.mul(m)?.sum_over(&[1])?.sqrt();
    m.div(&norms.add_scalar(eps))
}

/// Mean per-pair cosine similarity of the rows of p against the rows of z,
/// shape [N, 1] reduced to a one-element tensor.
fn mean_row_cosine(p: &Tensor, z: &Tensor) -> Result<Tensor> {
    let pn = normalize_rows(p, COSINE_EPS)?;
    let zn = normalize_rows(z, COSINE_EPS)?;
    pn.mul(&zn)?.sum_over(&[1])?.mean_all()
}

/// Symmetric stop-gradient loss from already-computed features:
/// -(D(p1, sg(z2)) + D(p2, sg(z1))) / 2, averaged over the batch.
pub fn simsiam_loss_from_features(
    p1: &Tensor,
    z1: &Tensor,
    p2: &Tensor,
    z2: &Tensor,
) -> Result<Tensor> {
    if p1.shape() != p2.shape() || z1.shape() != z2.shape() || p1.shape() != z1.shape() {
        return Err(Error::shape(
            format!("{:?}", p1.shape()),
            format!(
                "p2 {:?}, z1 {:?}, z2 {:?}",
                p2.shape(),
                z1.shape(),
                z2.shape()
            ),
        ));
    }
    let d1 = mean_row_cosine(p1, &z1.stop_gradient())?;
    let d2 = mean_row_cosine(p2, &z2.stop_gradient())?;
    Ok(d1.add(&d2)?.scale(-0.5))
}

/// Symmetric stop-gradient loss over two co-located patch batches run
/// through the shared-weight encoder and predictor. The batch loss lies in
/// [-1, 1]; gradients reach z only through the predictor branch.
pub fn simsiam_loss(model: &MtcNetModel, x1: &Tensor, x2: &Tensor, mode: Mode) -> Result<Tensor> {
    if x1.shape() != x2.shape() {
        return Err(Error::shape(
            format!("{:?}", x1.shape()),
            format!("{:?}", x2.shape()),
        ));
    }
    let (z1, _) = model.encode(x1, mode)?;
    let (z2, _) = model.encode(x2, mode)?;
    let p1 = model.predict(&z1, mode)?;
    let p2 = model.predict(&z2, mode)?;
    // Loss pairs p1 with z2 and p2 with z1.
    let d1 = mean_row_cosine(&p1, &z2.stop_gradient())?;
    let d2 = mean_row_cosine(&p2, &z1.stop_gradient())?;
    Ok(d1.add(&d2)?.scale(-0.5))
}

/// Variant without the stop-gradient, for the semantics checks: gradients
/// flow into both branches.
pub fn simsiam_loss_no_stopgrad(
    model: &MtcNetModel,
    x1: &Tensor,
    x2: &Tensor,
    mode: Mode,
) -> Result<Tensor> {
    let (z1, _) = model.encode(x1, mode)?;
    let (z2, _) = model.encode(x2, mode)?;
    let p1 = model.predict(&z1, mode)?;
    let p2 = model.predict(&z2, mode)?;
    let d1 = mean_row_cosine(&p1, &z2)?;
    let d2 = mean_row_cosine(&p2, &z1)?;
    Ok(d1.add(&d2)?.scale(-0.5))
}

/// Loss with the projected features frozen at externally supplied constants,
/// the reference for finite-difference checks of the stop-gradient path.
pub fn simsiam_loss_frozen_z(
    model: &MtcNetModel,
    x1: &Tensor,
    x2: &Tensor,
    z1_const: &Tensor,
    z2_const: &Tensor,
    mode: Mode,
) -> Result<Tensor> {
    let (z1, _) = model.encode(x1, mode)?;
    let (z2, _) = model.encode(x2, mode)?;
    let p1 = model.predict(&z1, mode)?;
    let p2 = model.predict(&z2, mode)?;
    let d1 = mean_row_cosine(&p1, z2_const)?;
    let d2 = mean_row_cosine(&p2, z1_const)?;
    Ok(d1.add(&d2)?.scale(-0.5))
}
